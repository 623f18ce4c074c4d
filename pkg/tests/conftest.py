import numpy as np
import pytest
import torch

from gfss.data import DatasetSpec, base_training_set, generate_synthetic_dataset, split_folds
from gfss.training import desk_config

torch.set_num_threads(1)

# filled by test_acceptance.py, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(**overrides):
    """A config small enough for sub-second training runs."""
    base = dict(pretrain_epochs=2, finetune_epochs=3, batch_size=4, crop_size=32, cutout_size=8,
                backbone_widths="8,8,8", feature_dim=8)
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture(scope="session")
def tiny_data():
    spec = DatasetSpec(num_classes=8, num_folds=2, images_per_class=4, image_size=(32, 32), seed=3)
    train, test = generate_synthetic_dataset(spec)
    tax = split_folds(range(1, 9), 2, 0)
    return train, test, tax, base_training_set(train, tax)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_relative_error(fn, inputs, step=1e-4):
    """Relative error between autograd and central differences of scalar ``fn(*inputs)``.

    Inputs must be float64 leaf tensors with requires_grad set. The error is
    ||analytic - numeric|| / max(||numeric||, 1e-12) over all inputs jointly.
    """
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, analytic)]
    numeric = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn(*inputs).item()
                flat[i] = orig - step
                down = fn(*inputs).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            numeric.append(g)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return float((a - n).norm() / max(float(n.norm()), 1e-12))
