import numpy as np
import pytest
import torch

from shadowseg.backbone import ToyEncoder, encode_text, toy_config


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config()


@pytest.fixture(scope="session")
def toy_encoder(toy_cfg):
    return ToyEncoder(toy_cfg)


@pytest.fixture(scope="session")
def text_ref(toy_cfg, toy_encoder):
    return encode_text(["a photo of a shadow"], toy_cfg, toy_encoder)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_image(rng, size=64):
    return rng.uniform(0.0, 1.0, size=(size, size, 3))


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central finite differences of a scalar loss w.r.t. parameter tensors.

    ``loss_fn`` recomputes the loss from the params' current values; params
    are perturbed in place through ``.data`` and restored exactly.
    """
    grads = []
    for p in params:
        grad = torch.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), grad.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def max_relative_error(analytic, numeric, floor=1e-5):
    errs = []
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()),
                              torch.full_like(a, floor))
        errs.append(float(((a - n).abs() / denom).max()))
    return max(errs)
