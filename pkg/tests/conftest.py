import numpy as np
import pytest

from diffppo.autodiff import Tensor

FD_H = 1e-5
FD_TOL = 1e-4


def fd_check(build_loss, params, h=FD_H, tol=FD_TOL):
    """Central finite-difference check for every element of every leaf param.

    build_loss() must rebuild the graph from the current param values.
    Error metric: |grad - fd| / max(1, |grad|) < tol.
    """
    loss = build_loss()
    for p in params:
        p.grad = None
    loss.backward()
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().value)
            flat[i] = orig - h
            down = float(build_loss().value)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            g = grad.reshape(-1)[i]
            err = abs(g - fd) / max(1.0, abs(g))
            assert err < tol, f"fd mismatch at {p.name}[{i}]: grad={g}, fd={fd}, err={err}"


def leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name="leaf")


@pytest.fixture(scope="session")
def pointmass_dataset():
    from diffppo.datasets import generate_logged_dataset

    return generate_logged_dataset("pointmass", "pd", 3000, seed=7)


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory, pointmass_dataset, trained_pointmass_prior):
    """Dataset file + prior checkpoint on disk for CLI-level tests."""
    from diffppo.datasets import save_dataset
    from diffppo.nn import save_checkpoint

    root = tmp_path_factory.mktemp("cli")
    save_dataset(pointmass_dataset, root / "dataset.bin")
    save_checkpoint(root / "prior.npz", trained_pointmass_prior)
    return root


@pytest.fixture(scope="session")
def trained_pointmass_prior(pointmass_dataset):
    """A lightly trained prior, good enough for sampling/plumbing tests."""
    from diffppo.prior import PriorTrainConfig, build_prior_from_dataset, train_prior

    rng = np.random.default_rng(11)
    prior = build_prior_from_dataset(pointmass_dataset, rng)
    train_prior(prior, pointmass_dataset, PriorTrainConfig(steps=400, eval_every=200), rng)
    return prior
