# # Decoding knobs
#
# Beam search ranks finished hypotheses by logprob / length ** length_penalty.
# A toy three-token model makes the effect of the penalty visible.

import numpy as np

from prefixmm.generation import beam_search, get_preset, sample_search, top_k_top_p_filter

EOS = 2


def step(prefixes):
    # "a" is likely, "b" less so; EOS grows likelier as the text gets longer
    rows = []
    for p in prefixes:
        stop = min(0.15 * (len(p) + 1), 0.9)
        rows.append(np.log([(1 - stop) * 0.7, (1 - stop) * 0.3, stop]))
    return np.array(rows)


for lp in (-2.0, 0.0, 1.0):
    best = beam_search(step, EOS, 8, 4, lp)[0]
    print(f"length_penalty {lp:+.1f}: {best.tokens}  score {best.score(lp):.3f}")

# ## no_repeat_ngram blocks repeats inside the generated text

best = beam_search(step, EOS, 8, 4, 1.0, no_repeat_ngram=2)[0]
print("no 2-gram repeats:", best.tokens)

# ## Top-k then top-p, only when sampling

print(np.exp(top_k_top_p_filter(np.log([0.5, 0.3, 0.15, 0.05]), k=3, p=0.8)).round(3))
rng = np.random.default_rng(0)
for h in sample_search(step, EOS, 8, 3, 3, 0.9, 1.0, 3, rng):
    print("sample:", h.tokens)

print(get_preset("Open-VQA image"))
