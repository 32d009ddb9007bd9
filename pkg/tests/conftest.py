import numpy as np
import pytest

ACCEPTANCE_LINES = []


def numeric_grad(loss_fn, tensor, eps=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``tensor.data`` (perturbed in place)."""
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = tensor.data[idx]
        tensor.data[idx] = orig + eps
        up = loss_fn()
        tensor.data[idx] = orig - eps
        down = loss_fn()
        tensor.data[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    """Norm-wise relative error, max|a - n| / max(max|a|, max|n|)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY = dict(embed_dim=8, attn_dim=4, ffn_dim=8, text_dim=5, template_len=4, class_token_len=2,
            alpha=0.1, lam=0.25, epochs=2, warmup_epochs=1, seeds=(0,))
TINY_NAMES = ("neg", "micro", "macro")


def tiny_config(**overrides):
    from mdemil.trainer import TrainConfig

    return TrainConfig(**{**TINY, **overrides}).validate()


def tiny_model(seed=0, in_dim=6, **overrides):
    from mdemil.trainer import build_model

    bundle, bank, _ = build_model(in_dim, TINY_NAMES, tiny_config(**overrides), seed)
    return bundle, bank


def toy_bags(rng, n_bags=6, in_dim=6, num_classes=3, n_range=(2, 6)):
    from mdemil.bags import Bag

    return [
        Bag(f"t{i}", i % num_classes, rng.standard_normal((int(rng.integers(*n_range)), in_dim)))
        for i in range(n_bags)
    ]
