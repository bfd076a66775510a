import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from carfield.encoding import (
    Cone,
    dir_encode,
    frustum_gaussian,
    integrated_pos_enc,
    ipe_encode,
    ipe_width,
    pixel_footprint_radius,
    pos_enc,
)
from carfield.errors import InvalidIntervalError

F64 = torch.float64


def mc_pos_enc_expectation(mean: np.ndarray, cov: np.ndarray, levels: int, n: int, gen: torch.Generator):
    """Monte Carlo E[PE(x)] for x ~ N(mean, cov), in chunks.

    Higher frequencies come from the double-angle identities rather than
    fresh sin/cos calls, which keeps the oracle independent of the encoder
    and cheap enough for 10^6 samples.
    """
    chol = torch.linalg.cholesky(torch.as_tensor(cov, dtype=F64) + 1e-15 * torch.eye(3, dtype=F64))
    mu = torch.as_tensor(mean, dtype=F64)
    acc = torch.zeros(levels, 3, 2, dtype=F64)
    chunk = 250_000
    for s in range(0, n, chunk):
        x = mu + torch.randn(min(chunk, n - s), 3, generator=gen, dtype=F64) @ chol.T
        sin, cos = torch.sin(x), torch.cos(x)
        for level in range(levels):
            acc[level, :, 0] += sin.sum(dim=0)
            acc[level, :, 1] += cos.sum(dim=0)
            sin, cos = 2 * sin * cos, 1 - 2 * sin * sin
    return acc.reshape(-1) / n


def random_covariance(rng: np.random.Generator) -> np.ndarray:
    """Random SPD matrix with diagonal entries in [0, 1]."""
    diag = rng.uniform(0.0, 1.0, size=3)
    a = rng.normal(size=(3, 3))
    c = a @ a.T + 0.1 * np.eye(3)
    d = np.sqrt(np.diag(c))
    corr = c / np.outer(d, d)
    s = np.sqrt(diag)
    return corr * np.outer(s, s)


def sample_frustum(cone: Cone, t0: float, t1: float, n: int, gen: torch.Generator) -> torch.Tensor:
    """Uniform samples from the solid conical frustum between t0 and t1."""
    u = torch.rand(n, generator=gen, dtype=F64)
    t = (t0**3 + u * (t1**3 - t0**3)) ** (1.0 / 3.0)  # density proportional to t^2
    rho = torch.sqrt(torch.rand(n, generator=gen, dtype=F64))
    phi = 2 * math.pi * torch.rand(n, generator=gen, dtype=F64)
    d = cone.direction
    a = d / torch.linalg.norm(d)
    helper = (
        torch.tensor([1.0, 0.0, 0.0], dtype=F64) if abs(float(a[0])) < 0.9 else torch.tensor([0.0, 1.0, 0.0], dtype=F64)
    )
    e1 = torch.linalg.cross(a, helper)
    e1 = e1 / torch.linalg.norm(e1)
    e2 = torch.linalg.cross(a, e1)
    r = cone.radius * t * rho
    return cone.origin + t[:, None] * d + (r * torch.cos(phi))[:, None] * e1 + (r * torch.sin(phi))[:, None] * e2


def test_frustum_rejects_bad_intervals():
    cone = Cone(torch.zeros(3), torch.tensor([0.0, 0.0, -1.0]), torch.tensor(0.01))
    for t0, t1 in [(0.0, 1.0), (-1.0, 1.0), (1.0, 1.0), (2.0, 1.0)]:
        with pytest.raises(InvalidIntervalError):
            frustum_gaussian(cone, t0, t1)


def test_frustum_thin_interval_limits():
    # a vanishing interval collapses onto the point o + t d with radial variance (r t)^2 / 4
    cone = Cone(torch.zeros(3, dtype=F64), torch.tensor([0.0, 0.0, -2.0], dtype=F64), torch.tensor(0.1, dtype=F64))
    seg = frustum_gaussian(cone, 1.0, 1.0 + 1e-7)
    assert torch.allclose(seg.mean, torch.tensor([0.0, 0.0, -2.0], dtype=F64), atol=1e-6)
    assert float(seg.axial_var) < 1e-12
    assert float(seg.radial_var) == pytest.approx(0.1**2 / 4, rel=1e-5)


def test_frustum_batched_shapes():
    b, n = 5, 7
    cone = Cone(torch.zeros(b, 1, 3), torch.randn(b, 1, 3), torch.full((b, 1), 0.01))
    edges = torch.linspace(1.0, 2.0, n + 1).expand(b, n + 1)
    seg = frustum_gaussian(cone, edges[:, :-1], edges[:, 1:])
    assert seg.mean.shape == (b, n, 3)
    assert seg.axial_var.shape == (b, n)
    assert ipe_encode(seg, 4).shape == (b, n, ipe_width(4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_zero_variance_ipe_is_pe(x):
    x = torch.tensor(x, dtype=F64)
    assert torch.allclose(integrated_pos_enc(x, torch.zeros(3, dtype=F64), 6), pos_enc(x, 6))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3))
def test_ipe_features_bounded_and_attenuate(v):
    mean = torch.tensor([0.3, -0.2, 0.7], dtype=F64)
    var = torch.tensor(v, dtype=F64)
    enc = integrated_pos_enc(mean, var, 6)
    assert torch.all(enc.abs() <= 1.0 + 1e-12)
    # more variance never increases any feature magnitude
    wider = integrated_pos_enc(mean, var + 0.1, 6)
    assert torch.all(wider.abs() <= enc.abs() + 1e-12)


def test_encoding_layout_is_frequency_major():
    x = torch.tensor([0.1, 0.2, 0.3], dtype=F64)
    enc = pos_enc(x, 2).reshape(2, 3, 2)
    for level in range(2):
        for axis in range(3):
            arg = 2.0**level * x[axis]
            assert float(enc[level, axis, 0]) == pytest.approx(math.sin(arg))
            assert float(enc[level, axis, 1]) == pytest.approx(math.cos(arg))


def test_dir_encode_normalizes():
    d = torch.tensor([[0.0, 0.0, -3.0]], dtype=F64)
    assert torch.allclose(dir_encode(d, 4), dir_encode(d / 3.0, 4))
    assert dir_encode(d, 4).shape == (1, 24)


def test_footprint_radius():
    assert pixel_footprint_radius(100.0) == pytest.approx(2.0 / math.sqrt(12.0) / 100.0)
