# # Overfitting a small shape dataset
#
# Four procedurally drawn images, four questions each. Only the adapters and
# the resampler train; the decoder and the vision tower stay frozen.

from prefixmm.generation import generate_text, get_preset
from prefixmm.model import ModelConfig, MultimodalModel
from prefixmm.synthetic import memorization_set
from prefixmm.trainer import MediaCache, StageConfig, fit_samples

store, samples = memorization_set(n_images=4, resolution=112)
model = MultimodalModel(ModelConfig(max_seq_len=160))
stage = StageConfig("finetune", 800, 2e-3, 0.05, 2e-4, batch_size=8, resolution=112,
                    loss_mask_policy="response_only")
result = fit_samples(model, samples, stage, MediaCache(store), target=0.01, eval_every=50)
for step, loss in result.eval_losses:
    print(f"step {step:4d}  loss {loss:.4f}")

# With length_penalty -2 a sequence's score is logprob * len**2, so a
# 10-byte answer must be far more certain than an immediate end-of-text.
# The frozen random output head caps per-token confidence near 0.99, and
# the longer answers can lose to the empty string. lp 0 ranks by logprob.
for lp in (-2.0, 0.0):
    preset = get_preset("Open-VQA image").with_overrides(max_new_tokens=16, length_penalty=lp)
    hits = 0
    print(f"length_penalty {lp}")
    for s in samples:
        answer = generate_text(model, store[s.media], s.prompt, preset)
        hits += answer == s.response
        print(f"  {s.prompt:<54} -> {answer!r}")
    print(f"  {hits}/{len(samples)} exact")
