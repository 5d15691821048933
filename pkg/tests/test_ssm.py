"""Selective-SSM discretization, scan oracles, and the fused differentiable op."""

import numpy as np
import pytest

from msmamba import ops
from msmamba.gradcheck import gradcheck
from msmamba.ssm import (
    DiscreteSSM,
    SSMParams,
    selective_scan_chunked,
    selective_scan_seq,
    ssm_apply,
    zoh_discretize,
)
from msmamba.tensor import ContractViolation, Tensor


def hand_params(A_log, W_B, W_dt, b_dt, W_C=None, D_skip=None):
    A_log = np.asarray(A_log, dtype=np.float64)
    D, N = A_log.shape
    return SSMParams(
        A_log=A_log,
        W_B=np.asarray(W_B, dtype=np.float64),
        W_C=np.asarray(W_C if W_C is not None else np.zeros((N, D)), dtype=np.float64),
        W_dt=np.asarray(W_dt, dtype=np.float64),
        b_dt=np.asarray(b_dt, dtype=np.float64),
        D_skip=np.asarray(D_skip if D_skip is not None else np.ones(D), dtype=np.float64),
    )


class TestDiscretize:
    def test_decay_factor_hand_value(self):
        # dt fixed at 0.5 via the bias (zero dt projection), A = -0.2
        p = hand_params(
            A_log=[[np.log(0.2)]], W_B=[[1.0]], W_dt=[[0.0]],
            b_dt=[np.log(np.expm1(0.5))],
        )
        d = zoh_discretize(p, np.array([[1.0]]))
        np.testing.assert_allclose(d.abar[0, 0, 0], np.exp(-0.1), rtol=1e-12)

    def test_input_term_hand_value(self):
        # A = -2, dt = 0.5, effective B_t = 1 for x = 3 -> abar = e^-1, bbarx = 1.5
        p = hand_params(
            A_log=[[np.log(2.0)]], W_B=[[1.0 / 3.0]], W_dt=[[0.0]],
            b_dt=[np.log(np.expm1(0.5))],
        )
        d = zoh_discretize(p, np.array([[3.0]]))
        np.testing.assert_allclose(d.abar[0, 0, 0], np.exp(-1.0), rtol=1e-12)
        np.testing.assert_allclose(d.bbar_x[0, 0, 0], 1.5, rtol=1e-12)

    def test_decay_always_in_unit_interval(self):
        rng = np.random.default_rng(0)
        p = SSMParams.init(6, 4, rng)
        x = rng.normal(size=(50, 6)) * 3.0
        d = zoh_discretize(p, x)
        assert np.all(d.abar > 0.0) and np.all(d.abar < 1.0)

    def test_init_step_sizes_in_declared_range(self):
        rng = np.random.default_rng(1)
        p = SSMParams.init(32, 4, rng)
        dt0 = np.logaddexp(0.0, p.b_dt)  # softplus at zero input
        assert np.all(dt0 >= 1e-3 - 1e-12) and np.all(dt0 <= 1e-1 + 1e-12)
        assert np.all(p.A < 0)
        np.testing.assert_allclose(p.A_log[0], np.log(np.arange(1, 5)), rtol=1e-12)
        np.testing.assert_array_equal(p.D_skip, np.ones(32))

    def test_nonfinite_input_reports_position(self):
        p = SSMParams.init(2, 2, np.random.default_rng(2))
        x = np.zeros((6, 2))
        x[3, 1] = np.nan
        with pytest.raises(ContractViolation, match="index 3"):
            zoh_discretize(p, x)

    def test_wrong_width_rejected(self):
        p = SSMParams.init(2, 2, np.random.default_rng(3))
        with pytest.raises(ContractViolation):
            zoh_discretize(p, np.zeros((4, 3)))


class TestSequentialScan:
    def test_geometric_accumulation(self):
        # abar = 0.5, bbarx = 1 each step: h = 1, 1.5, 1.75 (partial geometric sums)
        d = DiscreteSSM(abar=np.full((3, 1, 1), 0.5), bbar_x=np.ones((3, 1, 1)))
        y = selective_scan_seq(d, np.ones((3, 1)), np.zeros(1), np.zeros((3, 1)))
        np.testing.assert_allclose(y[:, 0], [1.0, 1.5, 1.75], rtol=1e-15)

    def test_skip_connection_only(self):
        d = DiscreteSSM(abar=np.full((3, 1, 1), 0.5), bbar_x=np.ones((3, 1, 1)))
        x = np.array([[1.0], [2.0], [3.0]])
        y = selective_scan_seq(d, np.zeros((3, 1)), np.array([2.0]), x)
        np.testing.assert_allclose(y, 2.0 * x)

    def test_single_step(self):
        d = DiscreteSSM(abar=np.full((1, 1, 2), 0.9), bbar_x=np.array([[[0.3, 0.7]]]))
        y = selective_scan_seq(d, np.array([[1.0, 2.0]]), np.array([0.5]),
                               np.array([[4.0]]))
        np.testing.assert_allclose(y[0, 0], 0.3 + 2 * 0.7 + 0.5 * 4.0, rtol=1e-15)

    def test_hidden_state_bounded_by_geometric_series(self):
        rng = np.random.default_rng(4)
        L, D, N = 400, 3, 2
        abar = rng.uniform(0.1, 0.9, size=(L, D, N))
        bbar_x = rng.normal(size=(L, D, N))
        d = DiscreteSSM(abar=abar, bbar_x=bbar_x)
        _, hs = selective_scan_seq(
            d, rng.normal(size=(L, N)), np.zeros(D), np.zeros((L, D)),
            return_hidden=True,
        )
        bound = np.abs(bbar_x).max() / (1.0 - abar.max())
        assert np.abs(hs).max() <= bound

    def test_return_hidden_matches_output(self):
        rng = np.random.default_rng(5)
        p = SSMParams.init(3, 2, rng)
        x = rng.normal(size=(7, 3))
        d = zoh_discretize(p, x)
        C = p.C_of(x)
        y1 = selective_scan_seq(d, C, p.D_skip, x)
        y2, hs = selective_scan_seq(d, C, p.D_skip, x, return_hidden=True)
        np.testing.assert_array_equal(y1, y2)
        assert hs.shape == (7, 3, 2)


class TestChunkedScan:
    @pytest.mark.parametrize("L", [19, 257])
    def test_matches_reference_float64(self, L):
        rng = np.random.default_rng(6)
        p = SSMParams.init(8, 4, rng)
        x = rng.normal(size=(L, 8))
        d = zoh_discretize(p, x)
        C = p.C_of(x)
        ref = selective_scan_seq(d, C, p.D_skip, x)
        for chunk in (1, 2, 7, 8, 64, L):
            got = selective_scan_chunked(d, C, p.D_skip, x, chunk)
            assert np.abs(got - ref).max() <= 1e-12, f"chunk={chunk}"

    def test_matches_reference_float32(self):
        rng = np.random.default_rng(7)
        p = SSMParams.init(8, 4, rng, dtype=np.float32)
        x = rng.normal(size=(65, 8)).astype(np.float32)
        d = zoh_discretize(p, x)
        C = p.C_of(x).astype(np.float32)
        ref = selective_scan_seq(d, C, p.D_skip, x)
        for chunk in (1, 8, 65):
            got = selective_scan_chunked(d, C, p.D_skip, x, chunk)
            assert np.abs(got - ref).max() <= 1e-5, f"chunk={chunk}"

    def test_chunk_must_be_positive(self):
        d = DiscreteSSM(abar=np.full((2, 1, 1), 0.5), bbar_x=np.ones((2, 1, 1)))
        with pytest.raises(ContractViolation):
            selective_scan_chunked(d, np.ones((2, 1)), np.zeros(1), np.zeros((2, 1)), 0)


class TestFusedOp:
    def _problem(self, G=2, L=9, D=3, N=2, seed=8):
        rng = np.random.default_rng(seed)
        p = SSMParams.init(D, N, rng)
        x = rng.normal(size=(G, L, D))
        delta_pre = np.stack([xg @ p.W_dt.T + p.b_dt for xg in x])
        B_seq = np.stack([xg @ p.W_B.T for xg in x])
        C_seq = np.stack([xg @ p.W_C.T for xg in x])
        return p, x, delta_pre, B_seq, C_seq

    def test_forward_matches_reference_scan(self):
        p, x, delta_pre, B_seq, C_seq = self._problem()
        y = ssm_apply(
            Tensor(x, dtype=np.float64),
            Tensor(delta_pre, dtype=np.float64),
            Tensor(p.A_log, dtype=np.float64),
            Tensor(B_seq, dtype=np.float64),
            Tensor(C_seq, dtype=np.float64),
            Tensor(p.D_skip, dtype=np.float64),
        )
        for g in range(x.shape[0]):
            d = zoh_discretize(p, x[g])
            ref = selective_scan_seq(d, C_seq[g], p.D_skip, x[g])
            np.testing.assert_allclose(y.data[g], ref, rtol=0, atol=1e-12)

    def test_gradcheck_all_inputs(self):
        p, x, delta_pre, B_seq, C_seq = self._problem(G=1, L=6, D=2, N=2, seed=9)
        ts = [
            Tensor(x, dtype=np.float64, requires_grad=True),
            Tensor(delta_pre, dtype=np.float64, requires_grad=True),
            Tensor(p.A_log, dtype=np.float64, requires_grad=True),
            Tensor(B_seq, dtype=np.float64, requires_grad=True),
            Tensor(C_seq, dtype=np.float64, requires_grad=True),
            Tensor(p.D_skip, dtype=np.float64, requires_grad=True),
        ]
        rep = gradcheck(
            lambda *a: ops.sum_(ops.mul(ssm_apply(*a), ssm_apply(*a))),
            ts,
            names=("x", "delta_pre", "A_log", "B", "C", "D_skip"),
        )
        assert rep.ok, rep.failures[:3]

    def test_decay_gradient_hand_value(self):
        # One channel, one state, two steps, identity readout:
        # y2 = abar2 * bbarx1 + bbarx2, so d y2 / d A_log = dt2 * A * abar2 * bbarx1.
        A_log = np.array([[np.log(2.0)]])
        dt_pre = np.full((1, 2, 1), 10.0)  # softplus(10) ~ 10 up to 5e-5
        dt = np.logaddexp(0.0, 10.0)
        x = np.array([[[1.0], [0.0]]])
        B_seq = np.array([[[0.5], [0.0]]])
        C_seq = np.array([[[0.0], [1.0]]])
        a_log_t = Tensor(A_log, dtype=np.float64, requires_grad=True)
        from msmamba.tensor import Tape, backward

        with Tape():
            y = ssm_apply(
                Tensor(x, dtype=np.float64),
                Tensor(dt_pre, dtype=np.float64),
                a_log_t,
                Tensor(B_seq, dtype=np.float64),
                Tensor(C_seq, dtype=np.float64),
                Tensor(np.zeros(1), dtype=np.float64),
            )
            backward(ops.sum_(y))
        abar = np.exp(dt * -2.0)
        bbarx1 = dt * 0.5 * 1.0
        expect = dt * (-2.0) * abar * bbarx1
        np.testing.assert_allclose(a_log_t.grad[0, 0], expect, rtol=1e-9)

    def test_shape_contract_errors(self):
        p, x, delta_pre, B_seq, C_seq = self._problem(G=1, L=4, D=2, N=2)
        good = dict(
            x=Tensor(x, dtype=np.float64),
            dp=Tensor(delta_pre, dtype=np.float64),
            al=Tensor(p.A_log, dtype=np.float64),
            b=Tensor(B_seq, dtype=np.float64),
            c=Tensor(C_seq, dtype=np.float64),
            dk=Tensor(p.D_skip, dtype=np.float64),
        )
        with pytest.raises(ContractViolation):
            ssm_apply(good["x"], Tensor(np.zeros((1, 3, 2)), dtype=np.float64),
                      good["al"], good["b"], good["c"], good["dk"])
        with pytest.raises(ContractViolation):
            ssm_apply(good["x"], good["dp"], good["al"],
                      Tensor(np.zeros((1, 4, 3)), dtype=np.float64), good["c"],
                      good["dk"])
        with pytest.raises(ContractViolation):
            ssm_apply(good["x"], good["dp"], good["al"], good["b"], good["c"],
                      Tensor(np.zeros(3), dtype=np.float64))
