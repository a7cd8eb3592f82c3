"""Kronecker-sum math against brute-force oracles."""

import pytest
import torch

from compfreeze.kron import (
    FactorSet,
    PHMSpec,
    init_factors,
    init_shared_a,
    kronecker_product,
    phm_compose,
    phm_forward,
    phm_param_count,
)


def kron_oracle(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Nested-loop Kronecker product, written before the vectorized build."""
    p, q = a.shape
    m, l = b.shape
    out = torch.zeros(p * m, q * l, dtype=a.dtype)
    for i in range(p):
        for j in range(q):
            for u in range(m):
                for v in range(l):
                    out[i * m + u, j * l + v] = a[i, j] * b[u, v]
    return out


def compose_oracle(spec: PHMSpec, factors: FactorSet) -> torch.Tensor:
    total = torch.zeros(spec.in_dim, spec.out_dim, dtype=factors.s.dtype)
    for i in range(spec.n):
        total = total + kron_oracle(factors.shared_a[i], factors.s[i] @ factors.t[i])
    return total


def random_factors(spec: PHMSpec, gen: torch.Generator) -> FactorSet:
    shared = init_shared_a(spec.n, 0.5, gen, dtype=torch.float64)
    f = init_factors(spec, shared, generator=gen, dtype=torch.float64, s_std=1.0)
    f.bias = torch.randn(spec.out_dim, generator=gen, dtype=torch.float64)
    return f


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(b.abs().max().item(), 1e-300)
    return ((a - b).abs().max() / scale).item()


class TestKroneckerProduct:
    def test_identity_scalar_leaves_matrix_unchanged(self):
        b = torch.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        out = kronecker_product(torch.tensor([[1.0]]), b)
        assert torch.equal(out, b)

    def test_shape_rule(self):
        a = torch.randn(2, 2)
        b = torch.randn(3, 5)
        assert kronecker_product(a, b).shape == (6, 10)

    def test_matches_nested_loop_oracle(self):
        a = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
        b = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        out = kronecker_product(a, b)
        assert out.shape == (4, 4)
        assert torch.equal(out, kron_oracle(a, b))

    def test_bilinearity(self):
        gen = torch.Generator().manual_seed(5)
        for _ in range(20):
            a1 = torch.randn(3, 2, generator=gen, dtype=torch.float64)
            a2 = torch.randn(3, 2, generator=gen, dtype=torch.float64)
            b = torch.randn(2, 4, generator=gen, dtype=torch.float64)
            alpha = torch.randn((), generator=gen, dtype=torch.float64)
            assert rel_err(kronecker_product(alpha * a1, b),
                           alpha * kronecker_product(a1, b)) <= 1e-12
            assert rel_err(kronecker_product(a1 + a2, b),
                           kronecker_product(a1, b) + kronecker_product(a2, b)) <= 1e-12

    def test_mixed_product_identity(self):
        gen = torch.Generator().manual_seed(6)
        for _ in range(20):
            a, b, c, d = (torch.randn(2, 2, generator=gen, dtype=torch.float64) for _ in range(4))
            lhs = kronecker_product(a, b) @ kronecker_product(c, d)
            rhs = kronecker_product(a @ c, b @ d)
            assert rel_err(lhs, rhs) <= 1e-10

    def test_rejects_non_matrices_and_nonfinite(self):
        with pytest.raises(ValueError):
            kronecker_product(torch.zeros(3), torch.zeros(2, 2))
        bad = torch.tensor([[float("nan")]])
        with pytest.raises(ValueError):
            kronecker_product(bad, torch.zeros(2, 2))


class TestCompose:
    def test_n1_degenerates_to_low_rank_linear(self):
        spec = PHMSpec(n=1, in_dim=3, out_dim=4, rank=2)
        gen = torch.Generator().manual_seed(7)
        f = random_factors(spec, gen)
        f.shared_a = torch.ones(1, 1, 1, dtype=torch.float64)
        assert rel_err(phm_compose(spec, f), f.s[0] @ f.t[0]) <= 1e-15

    def test_matches_kron_sum_oracle(self):
        spec = PHMSpec(n=2, in_dim=4, out_dim=4)
        gen = torch.Generator().manual_seed(8)
        f = random_factors(spec, gen)
        assert rel_err(phm_compose(spec, f), compose_oracle(spec, f)) <= 1e-12

    def test_paper_scale_shape(self):
        # hidden 768 with reduction 16 gives a 48-wide bottleneck
        spec = PHMSpec(n=4, in_dim=768, out_dim=48)
        gen = torch.Generator().manual_seed(9)
        f = random_factors(spec, gen)
        assert phm_compose(spec, f).shape == (768, 48)

    def test_shape_mismatch_rejected(self):
        spec = PHMSpec(n=2, in_dim=4, out_dim=4)
        gen = torch.Generator().manual_seed(10)
        f = random_factors(spec, gen)
        f.s = f.s[:, :1, :]
        with pytest.raises(ValueError):
            phm_compose(spec, f)


class TestForward:
    def test_zero_input_returns_bias(self):
        spec = PHMSpec(n=2, in_dim=8, out_dim=4)
        gen = torch.Generator().manual_seed(11)
        f = random_factors(spec, gen)
        out = phm_forward(torch.zeros(8, dtype=torch.float64), spec, f)
        assert torch.equal(out, f.bias)

    def test_matches_materialized_product(self):
        spec = PHMSpec(n=2, in_dim=8, out_dim=4)
        gen = torch.Generator().manual_seed(12)
        f = random_factors(spec, gen)
        x = torch.randn(8, generator=gen, dtype=torch.float64)
        want = x @ phm_compose(spec, f) + f.bias
        assert rel_err(phm_forward(x, spec, f), want) <= 1e-6

    def test_batch_is_row_wise(self):
        spec = PHMSpec(n=2, in_dim=8, out_dim=4)
        gen = torch.Generator().manual_seed(13)
        f = random_factors(spec, gen)
        x = torch.randn(3, 8, generator=gen, dtype=torch.float64)
        out = phm_forward(x, spec, f)
        assert out.shape == (3, 4)
        for row in range(3):
            assert rel_err(out[row], phm_forward(x[row], spec, f)) <= 1e-12

    def test_200_random_draws(self):
        gen = torch.Generator().manual_seed(14)
        sizes = [4, 8, 12, 16]
        for i in range(200):
            n = [1, 2, 4][i % 3]
            k = sizes[i % 4] * n
            d = sizes[(i + 1) % 4] * n
            spec = PHMSpec(n=n, in_dim=k, out_dim=d, rank=1 + i % 3)
            f = random_factors(spec, gen)
            x = torch.randn(2, k, generator=gen, dtype=torch.float64)
            want = x @ phm_compose(spec, f) + f.bias
            assert rel_err(phm_forward(x, spec, f), want) <= 1e-6

    def test_width_mismatch_rejected(self):
        spec = PHMSpec(n=2, in_dim=8, out_dim=4)
        gen = torch.Generator().manual_seed(15)
        f = random_factors(spec, gen)
        with pytest.raises(ValueError):
            phm_forward(torch.zeros(7, dtype=torch.float64), spec, f)


class TestParamCount:
    def count_stored_entries(self, spec: PHMSpec, with_shared: bool) -> int:
        """Enumeration oracle: build the factors and count every element."""
        gen = torch.Generator().manual_seed(0)
        f = random_factors(spec, gen)
        total = f.s.numel() + f.t.numel() + f.bias.numel()
        if with_shared:
            total += f.shared_a.numel()
        return total

    def test_bottleneck_projection_count(self):
        spec = PHMSpec(n=4, in_dim=768, out_dim=48, rank=1)
        pc = phm_param_count(spec, count_shared_a=True)
        assert pc.per_layer == 4 * (192 + 12) + 48 == 864
        assert pc.shared == 64
        assert pc.total == self.count_stored_entries(spec, True)

    def test_tiny_hand_count(self):
        pc = phm_param_count(PHMSpec(n=1, in_dim=2, out_dim=2, rank=1), count_shared_a=True)
        assert pc.per_layer == 1 * (2 + 2) + 2 == 6
        assert pc.shared == 1

    def test_full_adapter_pair(self):
        down = phm_param_count(PHMSpec(n=4, in_dim=768, out_dim=48), False)
        up = phm_param_count(PHMSpec(n=4, in_dim=48, out_dim=768), False)
        assert down.per_layer + up.per_layer == 864 + (4 * (12 + 192) + 768) == 2448

    def test_matches_enumeration_for_varied_specs(self):
        gen = torch.Generator().manual_seed(16)
        for n in (1, 2, 4):
            for rank in (1, 2):
                k = n * int(torch.randint(1, 6, (), generator=gen)) * 2
                d = n * int(torch.randint(1, 6, (), generator=gen)) * 2
                spec = PHMSpec(n=n, in_dim=k, out_dim=d, rank=rank)
                for shared in (True, False):
                    assert phm_param_count(spec, shared).total == \
                        self.count_stored_entries(spec, shared)


class TestGradients:
    def test_forward_gradients_match_finite_differences(self):
        spec = PHMSpec(n=2, in_dim=8, out_dim=4, rank=2)
        gen = torch.Generator().manual_seed(17)
        step = 1e-5
        for _ in range(5):
            f = random_factors(spec, gen)
            for tensor in (f.shared_a, f.s, f.t, f.bias):
                tensor.requires_grad_(True)
            x = torch.randn(8, generator=gen, dtype=torch.float64)
            probe = torch.randn(4, generator=gen, dtype=torch.float64)
            loss = (phm_forward(x, spec, f) * probe).sum()
            loss.backward()
            for tensor in (f.shared_a, f.s, f.t, f.bias):
                grad = tensor.grad.clone()
                flat = tensor.detach().reshape(-1)
                for idx in range(flat.numel()):
                    orig = flat[idx].item()
                    with torch.no_grad():
                        flat[idx] = orig + step
                        hi = (phm_forward(x, spec, f) * probe).sum().item()
                        flat[idx] = orig - step
                        lo = (phm_forward(x, spec, f) * probe).sum().item()
                        flat[idx] = orig
                    fd = (hi - lo) / (2 * step)
                    g = grad.reshape(-1)[idx].item()
                    assert abs(g - fd) <= 1e-4 * max(abs(g), abs(fd), 1e-8)


class TestSpecValidation:
    def test_divisibility(self):
        with pytest.raises(ValueError):
            PHMSpec(n=3, in_dim=8, out_dim=4)
        with pytest.raises(ValueError):
            PHMSpec(n=2, in_dim=8, out_dim=5)

    def test_positive_fields(self):
        with pytest.raises(ValueError):
            PHMSpec(n=2, in_dim=8, out_dim=4, rank=0)
        with pytest.raises(ValueError):
            PHMSpec(n=2, in_dim=8, out_dim=4, init_range=0.0)
