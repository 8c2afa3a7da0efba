# # The multimodal decoder
#
# Prefix mode puts the 32 vision tokens and a media-boundary embedding in
# front of the text. Adapters after each block start as the identity, so a
# freshly built model reproduces the frozen language model exactly.
# Cross-attention mode instead lets text attend to the vision tokens through
# tanh gates that start closed.

import numpy as np

from prefixmm import autodiff as ad
from prefixmm.model import ModelConfig, MultimodalModel
from prefixmm.synthetic import shape_image
from prefixmm.tokenizer import ByteTokenizer

tok = ByteTokenizer()
model = MultimodalModel(ModelConfig(d_model=64, n_layers=2, d_vision=32, max_seq_len=96))
ids = tok.encode("What color is the shape?", bos=True)
vision = model.encode_media(shape_image("red", "top left", "circle", resolution=224))

with ad.no_grad():
    packed = model.forward([vision], [ids])
    plain = model.forward([vision], [ids], use_adapters=False)
print("sequence layout: vision", packed.vision_len[0], "+ boundary + text", len(ids), "=", packed.lengths[0])
print("adapter output differs from base by", np.abs(packed.logits.data - plain.logits.data).max())

trainable = sum(p.data.size for p in model.trainable_parameters())
total = sum(p.data.size for p in model.parameters())
print(f"trainable parameters: {trainable} of {total}")

# ## Cross-attention mode with closed gates ignores the image

cross = MultimodalModel(ModelConfig(d_model=64, n_layers=2, d_vision=32, max_seq_len=96,
                                    fusion_mode="cross_attention"))
v = cross.encode_media(shape_image("red", "top left", "circle", resolution=224))
with ad.no_grad():
    a = cross.forward([v], [ids]).logits.data
    b = cross.forward([None], [ids]).logits.data
print("cross mode, vision vs no vision: %.1e (float32 rounding only)" % np.abs(a - b).max())
