"""Session fixtures: tiny randomly-initialized CLIP and ViT checkpoints
saved to disk, plus a deterministic test photograph.

The exporter only needs locally loadable models; these stand-ins keep the
contract tests hermetic (no hub access, no accuracy claims).
"""

import numpy as np
import pytest
import torch
from PIL import Image
from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors
from transformers import (
    CLIPConfig,
    CLIPModel,
    CLIPTextConfig,
    CLIPVisionConfig,
    PreTrainedTokenizerFast,
    ViTConfig,
    ViTModel,
)


def _char_level_tokenizer() -> PreTrainedTokenizerFast:
    chars = list("abcdefghijklmnopqrstuvwxyz0123456789.,:;!?()'-")
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    for ch in chars:
        vocab[ch] = len(vocab)
        vocab[ch + "</w>"] = len(vocab)
    bpe = models.BPE(vocab=vocab, merges=[], end_of_word_suffix="</w>", unk_token="<|endoftext|>")
    backend = Tokenizer(bpe)
    backend.normalizer = normalizers.Lowercase()
    backend.pre_tokenizer = pre_tokenizers.Whitespace()
    backend.post_processor = processors.TemplateProcessing(
        single="<|startoftext|> $A <|endoftext|>",
        special_tokens=[("<|startoftext|>", 0), ("<|endoftext|>", 1)],
    )
    return PreTrainedTokenizerFast(
        tokenizer_object=backend,
        bos_token="<|startoftext|>",
        eos_token="<|endoftext|>",
        unk_token="<|endoftext|>",
        pad_token="<|endoftext|>",
        model_max_length=77,
    )


@pytest.fixture(scope="session")
def toy_clip_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_clip")
    tok = _char_level_tokenizer()
    torch.manual_seed(1234)
    cfg = CLIPConfig(
        text_config=CLIPTextConfig(
            vocab_size=len(tok),
            hidden_size=32,
            intermediate_size=37,
            num_hidden_layers=2,
            num_attention_heads=2,
            max_position_embeddings=77,
            bos_token_id=tok.bos_token_id,
            eos_token_id=tok.eos_token_id,
        ).to_dict(),
        vision_config=CLIPVisionConfig(
            hidden_size=32,
            intermediate_size=37,
            num_hidden_layers=2,
            num_attention_heads=2,
            image_size=224,
            patch_size=16,
        ).to_dict(),
        projection_dim=24,
    )
    model = CLIPModel(cfg).eval()
    model.save_pretrained(out)
    tok.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def toy_vfm_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_vfm")
    torch.manual_seed(4321)
    model = ViTModel(
        ViTConfig(
            hidden_size=24,
            num_hidden_layers=2,
            num_attention_heads=2,
            intermediate_size=28,
            image_size=224,
            patch_size=8,  # finer than CLIP's 16: exercises 2x2 pooling
        )
    ).eval()
    model.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def photo_path(tmp_path_factory):
    rng = np.random.default_rng(7)
    h, w = 375, 500
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.stack(
        [
            (xx / w * 200 + rng.integers(0, 40, (h, w))),
            (yy / h * 180 + rng.integers(0, 40, (h, w))),
            ((xx + yy) % 255) * 0.7,
        ],
        axis=-1,
    ).clip(0, 255).astype(np.uint8)
    path = tmp_path_factory.mktemp("img") / "photo.png"
    Image.fromarray(img).save(path)
    return str(path)
