import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from embfuse import autodiff as ad
from embfuse.autodiff import Tensor, backward, grad_check
from embfuse.embedding import EmbeddingTable
from embfuse.errors import ConfigError, ContractError, DegenerateVectorError, TokenLookupError
from embfuse.objectives import (
    DEFAULT_LAMBDA,
    DEFAULT_LAMBDA_F,
    DEFAULT_TAU,
    LOW_RESOURCE_TAU,
    FusionConfig,
    LossBreakdown,
    RegularizationConfig,
    asr_loss,
    combined_fused_objective,
    combined_objective,
    cosine_softmax,
    fuse,
    fused_loss,
    reg_loss,
)
from embfuse.seq2seq import DecoderStepOutput


def test_default_hyperparameters():
    assert (DEFAULT_LAMBDA, DEFAULT_TAU, DEFAULT_LAMBDA_F, LOW_RESOURCE_TAU) == (10.0, 0.1, 0.1, 0.02)
    assert RegularizationConfig().lam == 10.0
    assert FusionConfig() == FusionConfig(0.1, 0.1)


@pytest.mark.parametrize(
    "p, y, expected",
    [([0.0, 1.0, 0.0], 1, 0.0), ([0.25] * 4, 2, 1.3862944), ([0.5, 0.5], 0, 0.6931472)],
)
def test_asr_loss_examples(p, y, expected):
    assert asr_loss(Tensor(p), y).item() == pytest.approx(expected, abs=1e-7)


def test_asr_loss_rejects_bad_target():
    with pytest.raises(TokenLookupError):
        asr_loss(Tensor([0.5, 0.5]), 2)
    with pytest.raises(TokenLookupError):
        asr_loss(Tensor([[0.5, 0.5]]), [-1])


def test_reg_loss_examples():
    e = Tensor([0.3, -1.2, 2.0])
    assert reg_loss(e, e.data).item() == pytest.approx(0.0, abs=1e-15)
    assert reg_loss(e, -e.data).item() == pytest.approx(2.0, abs=1e-15)
    assert reg_loss(Tensor([1.0, 2.0]), np.array([2.0, 1.0])).item() == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(DegenerateVectorError):
        reg_loss(Tensor([0.0, 0.0]), np.array([1.0, 0.0]))


def test_reg_loss_gives_no_gradient_to_target():
    target = Tensor([2.0, 1.0], requires_grad=True)
    e = Tensor([1.0, 2.0], requires_grad=True)
    backward(reg_loss(e, target))
    assert target.grad is None
    assert e.grad is not None


def test_cosine_softmax_examples():
    table = EmbeddingTable([[1.0, 0.0], [0.0, 1.0]])
    p = cosine_softmax(Tensor([1.0, 0.0]), table, 0.1).data
    np.testing.assert_allclose(p, [1 / (1 + math.exp(-10)), math.exp(-10) / (1 + math.exp(-10))], rtol=1e-14)
    assert p[0] == pytest.approx(0.9999546, abs=1e-7)

    same = EmbeddingTable(np.tile([0.3, -0.7, 0.1], (5, 1)))
    np.testing.assert_allclose(cosine_softmax(Tensor([1.0, 2.0, 3.0]), same).data, 0.2, atol=1e-15)

    rng = np.random.default_rng(0)
    t = EmbeddingTable(rng.normal(size=(6, 4)))
    e = rng.normal(size=4)
    np.testing.assert_allclose(
        cosine_softmax(Tensor(e * 7.0), t).data, cosine_softmax(Tensor(e), t).data, rtol=0, atol=1e-15
    )


def test_cosine_softmax_errors():
    with pytest.raises(ConfigError):
        cosine_softmax(Tensor([1.0, 0.0]), EmbeddingTable(np.eye(2)), 0.0)
    bad = np.eye(3)
    bad[1] = 0.0
    with pytest.raises(DegenerateVectorError, match="id 1"):
        cosine_softmax(Tensor([1.0, 0.0, 0.0]), EmbeddingTable(bad))


def test_fuse_examples():
    p_phi, p_theta = Tensor([0.8, 0.2]), Tensor([0.2, 0.8])
    np.testing.assert_allclose(fuse(p_phi, p_theta, 0.1).data, [0.74, 0.26], atol=1e-15)
    np.testing.assert_array_equal(fuse(p_phi, p_theta, 0.0).data, p_phi.data)
    np.testing.assert_array_equal(fuse(p_phi, p_theta, 1.0).data, p_theta.data)
    for bad in (-0.1, 1.5):
        with pytest.raises(ConfigError):
            fuse(p_phi, p_theta, bad)
    with pytest.raises(ContractError):
        fuse(Tensor([1.0]), p_theta)


def test_fused_loss_examples():
    assert fused_loss(Tensor([1.0, 0.0]), 0).item() == 0.0
    assert fused_loss(Tensor([0.74, 0.26]), 0).item() == pytest.approx(0.3011051, abs=1e-7)


def probabilities(n):
    return arrays(np.float64, n, elements=st.floats(1e-3, 1.0)).map(lambda a: a / a.sum())


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 9).flatmap(lambda n: st.tuples(probabilities(n), probabilities(n))), st.floats(0.0, 1.0))
def test_fuse_stays_a_distribution(pair, lam):
    p = fuse(Tensor(pair[0]), Tensor(pair[1]), lam).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0) and np.all(p < 1)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (5, 3), elements=st.floats(-5, 5)).filter(lambda m: np.all(np.linalg.norm(m, axis=1) > 1e-3)),
    arrays(np.float64, 3, elements=st.floats(-5, 5)).filter(lambda v: np.linalg.norm(v) > 1e-3),
    st.sampled_from([1e-2, 0.02, 0.1, 1.0, 10.0]),
)
def test_cosine_softmax_is_a_distribution(rows, e, tau):
    p = cosine_softmax(Tensor(e), EmbeddingTable(rows), tau).data
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p >= 0) and np.all(p <= 1)


def test_sharpening_is_monotone():
    rng = np.random.default_rng(5)
    table = EmbeddingTable(rng.normal(size=(8, 4)))
    e = Tensor(rng.normal(size=4))
    peaks = [cosine_softmax(e, table, tau).data.max() for tau in (1.0, 0.3, 0.1, 0.03, 0.01)]
    assert all(a < b for a, b in zip(peaks, peaks[1:]))


# --------------------------------------------------------------------------
# sequence objectives on hand-made step outputs


def fake_steps(p_rows, e_rows, requires_grad=False):
    out = []
    for p, e in zip(p_rows, e_rows):
        p_t = Tensor(np.atleast_2d(p), requires_grad=requires_grad)
        e_t = Tensor(np.atleast_2d(e), requires_grad=requires_grad)
        out.append(DecoderStepOutput(None, None, p_t, e_t, None))
    return out


def test_combined_objective_hand_arithmetic():
    # asr = -log p = 0.7, reg = 1 - cos = 0.1
    p = np.array([math.exp(-0.7), 1 - math.exp(-0.7)])
    e_target = np.array([1.0, 0.0])
    e = np.array([0.9, math.sqrt(1 - 0.81)])
    table = EmbeddingTable([e_target, [0.0, 1.0]])
    br = combined_objective(fake_steps([p], [e]), [0], table, RegularizationConfig(10.0))
    assert br.component == pytest.approx(0.7, abs=1e-12)
    assert br.reg == pytest.approx(0.1, abs=1e-12)
    assert br.total == pytest.approx(1.7, abs=1e-12)
    assert br.mean_cosine == pytest.approx(0.9, abs=1e-12)
    assert br.count == 1
    assert br.kind == "asr"


def random_case(seed, T=3, V=5, D=4):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(T, V))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    e = rng.normal(size=(T, D))
    table = EmbeddingTable(rng.normal(size=(V, D)))
    y = rng.integers(0, V, size=T)
    return p, e, table, y


def test_breakdown_invariant_and_log_line():
    p, e, table, y = random_case(1)
    br = combined_fused_objective(fake_steps(p, e), y, table, RegularizationConfig(3.0), FusionConfig(0.1, 0.3))
    assert abs(br.total - (br.component + 3.0 * br.reg)) < 1e-12
    rec = json.loads(br.to_json(7))
    assert set(rec) == {"step", "total", "asr_or_fused", "reg", "mean_cosine"}
    assert rec["step"] == 7
    assert isinstance(br, LossBreakdown) and br.kind == "fused"


def test_lambda_zero_is_exactly_the_asr_sum():
    p, e, table, y = random_case(2)
    br = combined_objective(fake_steps(p, e), y, table, RegularizationConfig(0.0))
    manual = None
    for t in range(len(y)):
        term = asr_loss(Tensor(p[t : t + 1]), [y[t]]).sum()
        manual = term if manual is None else manual + term
    assert br.total == manual.item()
    assert br.total == br.component
    # no table needed when lambda is 0
    assert combined_objective(fake_steps(p, e), y, None, RegularizationConfig(0.0)).total == br.total


def test_fused_reduces_to_plain_when_lambda_f_is_zero():
    p, e, table, y = random_case(3)
    reg = RegularizationConfig(10.0)
    plain = combined_objective(fake_steps(p, e), y, table, reg)
    fused = combined_fused_objective(fake_steps(p, e), y, table, reg, FusionConfig(0.1, 0.0))
    assert plain.total == fused.total
    assert plain.component == fused.component
    zero = combined_fused_objective(fake_steps(p, e), y, table, RegularizationConfig(0.0), FusionConfig(0.1, 0.0))
    assert zero.total == combined_objective(fake_steps(p, e), y, None, RegularizationConfig(0.0)).total


def test_objective_errors():
    p, e, table, y = random_case(4)
    with pytest.raises(ContractError):
        combined_objective(fake_steps(p, e), y[:2], table, RegularizationConfig())
    with pytest.raises(ConfigError):
        combined_objective(fake_steps(p, e), y, None, RegularizationConfig(1.0))
    with pytest.raises(ConfigError):
        RegularizationConfig(-1.0)
    with pytest.raises(ConfigError):
        FusionConfig(tau=0.0)
    with pytest.raises(ConfigError):
        FusionConfig(lambda_f=1.1)
    with pytest.raises(ContractError):
        combined_objective(fake_steps(p, e[:, :3]), y, table, RegularizationConfig())


@pytest.mark.parametrize("fused", [False, True])
def test_objective_gradients(fused):
    _, e, table, y = random_case(6)
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 5))

    def loss(point):
        lg, et = point[:, :5], point[:, 5:]
        steps = [
            DecoderStepOutput(None, None, ad.softmax(lg[t : t + 1]), et[t : t + 1], None) for t in range(3)
        ]
        if fused:
            return combined_fused_objective(steps, y, table, RegularizationConfig(2.0), FusionConfig(0.1, 0.4)).node
        return combined_objective(steps, y, table, RegularizationConfig(2.0)).node

    assert grad_check(loss, np.hstack([logits, e])) < 1e-4


def test_no_gradient_reaches_the_table():
    p, e, table, y = random_case(8)
    before = table.digest()
    steps = fake_steps(p, e, requires_grad=True)
    br = combined_fused_objective(steps, y, table, RegularizationConfig(10.0), FusionConfig())
    visited = backward(br.node)
    assert visited > 0
    assert table.digest() == before
    assert not table.matrix.flags.writeable
