# # Instruction data and the weighted mixture
#
# Records are rendered through prompt templates, then a seeded sampler picks
# a dataset by weight and a sample inside it.

import tempfile
from collections import Counter

from prefixmm.clients import StubClient
from prefixmm.data import (build_meta_prompt, expand_prompts, load_manifest, load_templates,
                           mixture_from_manifest, render_prompt)
from prefixmm.synthetic import write_standin_corpus

templates = load_templates()
print(render_prompt(templates["vqa_short"], {"question": "What is this"}))
print(render_prompt(templates["nlvr2"], {"hypothesis": "There are two dogs."}))

# ## Growing a prompt set
# The meta prompt asks a text model for paraphrases. A canned reply stands in
# for the remote model here.

seeds = ["Describe the image briefly.", "Summarize the picture.", "What does the image show?"]
print(build_meta_prompt(seeds))
reply = "1) Give a short description of the image.; 2) Summarize the picture.; 3) Briefly say what is shown."
print(expand_prompts(seeds, StubClient(reply)))

# ## Sampling from the pretraining mixture
# A stand-in corpus has a few records for each of the 50 datasets.

root = tempfile.mkdtemp()
manifest = load_manifest(write_standin_corpus(root, per_dataset=2, resolution=28))
stream = mixture_from_manifest(manifest, "pretrain", seed=0)
counts = Counter(s.dataset for s in stream.next_batch(2000))
for name, n in counts.most_common(5):
    print(f"{name:<16} {n / 2000:.3f}  (weight {manifest.by_name(name).pretrain_weight / 100:.3f})")
