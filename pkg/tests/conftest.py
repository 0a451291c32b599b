import sys
import numpy as np
import pytest
import torch

from cocodiff.config import RunConfig, TrainConfig
from cocodiff.dataset import GenerationSpec, GraphTopology, generate_dataset
from cocodiff.diffusion import DenoiserConfig
from cocodiff.encoder import EncoderConfig
from cocodiff.text import TextEncoderConfig


def central_difference(fn, tensor, index, eps=1e-6):
    """Central finite difference of scalar fn() w.r.t. tensor[index] (modified in place)."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + eps
        up = fn().item()
        tensor[index] = orig - eps
        down = fn().item()
        tensor[index] = orig
    return (up - down) / (2 * eps)


def assert_grad_matches(fn, tensors, n_probe=6, seed=0, rtol=1e-4):
    """Compare autograd against central differences on a few random entries per tensor."""
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    for t, g in zip(tensors, analytic):
        g = torch.zeros_like(t) if g is None else g
        flat = rng.choice(t.numel(), size=min(n_probe, t.numel()), replace=False)
        a = np.array([g.reshape(-1)[i].item() for i in flat])
        n = np.array([central_difference(fn, t.view(-1), int(i)) for i in flat])
        scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
        rel = np.abs(a - n).max() / scale
        assert rel < rtol, f"relative gradient error {rel:.3g} (analytic {a}, numeric {n})"
    return True


@pytest.fixture
def chain_topology():
    return GraphTopology(5, ((0, 1), (1, 2), (2, 3), (1, 4)), center_joint=1)


@pytest.fixture
def tiny_config(chain_topology):
    gen = GenerationSpec(num_classes=3, samples_per_class=6, topology=chain_topology, frames=8,
                         actors=2, jitter_std=0.05, seed=3)
    return RunConfig(
        generation=gen,
        text=TextEncoderConfig(embed_dim=8),
        encoder=EncoderConfig(widths=(4, 6), strides=(1, 2), temporal_kernel=3, feature_dim=6),
        denoiser=DenoiserConfig(hidden=(8, 4), time_embed_dim=4),
        train=TrainConfig(epochs=2, batch_size=4, warmup_epochs=1, lr_decay_epochs=(), select_best="last"),
        out_dir="unused",
    ).resolved()


@pytest.fixture
def tiny_dataset(tiny_config):
    return generate_dataset(tiny_config.generation)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
