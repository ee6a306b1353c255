import numpy as np
import pytest

from dualstage import data, fusion, swin, vit


def make_mini_model(vocabulary=("Atelectasis", "Cardiomegaly"), seed=0, dtype=np.float32):
    """Smallest config exercising both backbones, merging, and shifting."""
    vcfg = vit.ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2, mlp_ratio=2.0)
    scfg = swin.SwinConfig(
        image_size=8, patch_size=2, embed_dim=4, depths=(2, 2), num_heads=(1, 2),
        window_size=2, mlp_ratio=2.0,
    )
    return fusion.build_model(vcfg, scfg, vocabulary, seed=seed, dtype=dtype)


@pytest.fixture()
def mini_dataset(tmp_path):
    root = tmp_path / "synth"
    manifest, vocab = data.generate_synthetic_dataset(str(root), 2, 4, seed=123, image_size=8)
    samples = data.load_manifest(manifest, vocab)
    preprocess = data.PreprocessConfig(target_size=8, hflip_probability=0.0)
    return samples, vocab, preprocess, str(root)
