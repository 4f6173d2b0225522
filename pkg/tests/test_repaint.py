import numpy as np
import pytest

from maskdiff.clustering import build_registry
from maskdiff.denoiser import DenoiserNet
from maskdiff.diffusion import forward_sample, reverse_step
from maskdiff.repaint import (
    GenerationConfig,
    RepaintMask,
    binarize_and_dilate,
    default_dilation_radius,
    finalize_output,
    inpaint,
    repaint_plan,
    repaint_step,
    repaint_walk,
    renoise_step,
)
from maskdiff.rng import stream
from maskdiff.schedule import make_schedule, respace


class TestMaskPrep:
    def test_all_zero_mask_keeps_everything(self):
        m = binarize_and_dilate(np.zeros((8, 8)), 0.5, radius=3)
        assert np.all(m.m == 1.0)
        assert m.all_known and not m.all_unknown

    def test_center_pixel_radius_one_gives_3x3_block(self):
        mask = np.zeros((7, 7))
        mask[3, 3] = 1.0
        m = binarize_and_dilate(mask, 0.5, radius=1)
        unknown = m.m == 0.0
        assert unknown.sum() == 9
        assert np.all(unknown[2:5, 2:5])

    def test_radius_zero_no_dilation(self):
        mask = np.zeros((5, 5))
        mask[2, 2] = 1.0
        m = binarize_and_dilate(mask, 0.5, radius=0)
        assert (m.m == 0).sum() == 1

    def test_default_radius_scales_with_resolution(self):
        assert default_dilation_radius(256) == 20
        assert default_dilation_radius(32) == 2

    def test_threshold_behaviour(self):
        mask = np.array([[0.4, 0.6]])
        m = binarize_and_dilate(mask, 0.5, radius=0)
        assert list(m.m[0]) == [1.0, 0.0]

    def test_all_unknown_flagged(self):
        m = binarize_and_dilate(np.ones((4, 4)), 0.5, radius=0)
        assert m.all_unknown

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            binarize_and_dilate(np.zeros((4, 4)), 0.0, radius=1)

    def test_nonbinary_repaint_mask_rejected(self):
        with pytest.raises(ValueError):
            RepaintMask(m=np.full((2, 2), 0.5, dtype=np.float32), radius=0)


def reference_crossings(transitions, chain_len):
    """Independent characterization: count signed crossings per level
    boundary and check the up-run structure."""
    down = np.zeros(chain_len + 1, dtype=int)
    up = np.zeros(chain_len + 1, dtype=int)
    for a, b in transitions:
        assert abs(a - b) == 1
        if b < a:
            down[a] += 1
        else:
            up[b] += 1
    return down, up


class TestRepaintPlan:
    def test_r1_plain_descent(self):
        plan = repaint_plan(7, 3, 1)
        assert plan.n_down == 7 and plan.n_up == 0
        assert plan.transitions == tuple((t, t - 1) for t in range(7, 0, -1))

    def test_chain4_j2_r2_exact_pattern(self):
        plan = repaint_plan(4, 2, 2)
        expected = [
            (4, 3), (3, 2),
            (2, 3), (3, 4), (4, 3), (3, 2),
            (2, 1), (1, 0),
            (0, 1), (1, 2), (2, 1), (1, 0),
        ]
        assert list(plan.transitions) == expected
        assert plan.n_down == 8 and plan.n_up == 4

    def test_paper_setting_counts(self):
        plan = repaint_plan(120, 10, 5)
        assert plan.n_down == 120 * 5
        assert plan.n_up == 120 * 4
        assert plan.transitions[0] == (120, 119)
        assert plan.transitions[-1] == (1, 0)

    @pytest.mark.parametrize("chain", range(1, 13))
    @pytest.mark.parametrize("j", range(1, 5))
    @pytest.mark.parametrize("r", range(1, 4))
    def test_small_cases_match_independent_reference(self, chain, j, r):
        if j > chain:
            with pytest.raises(ValueError):
                repaint_plan(chain, j, r)
            return
        plan = repaint_plan(chain, j, r)
        # walk is connected, starts at the top, ends at zero
        t = chain
        for a, b in plan.transitions:
            assert a == t
            t = b
        assert t == 0
        down, up = reference_crossings(plan.transitions, chain)
        full_blocks = chain // j
        for level in range(1, chain + 1):
            in_full_block = (chain - level) // j < full_blocks and level > chain - full_blocks * j
            if in_full_block:
                assert down[level] == r and up[level] == r - 1, (level,)
            else:
                assert down[level] == 1 and up[level] == 0, (level,)
        # every maximal run of ups has length exactly j
        runs, cur = [], 0
        for a, b in plan.transitions:
            if b > a:
                cur += 1
            elif cur:
                runs.append(cur)
                cur = 0
        assert all(run == j for run in runs)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            repaint_plan(0, 1, 1)
        with pytest.raises(ValueError):
            repaint_plan(5, 0, 1)
        with pytest.raises(ValueError):
            repaint_plan(5, 1, 0)


@pytest.fixture(scope="module")
def respaced():
    return respace(make_schedule("linear", 12, 0.02, 0.2), 8, 2)


def zero_net(x, t):
    return np.zeros_like(x)


class TestRepaintStep:
    def test_all_known_equals_forward_of_source(self, respaced):
        src = stream(0, "src").uniform(-1, 1, (4, 8, 8)).astype(np.float32)
        mask = RepaintMask(m=np.ones((8, 8), np.float32), radius=0)
        x_t = stream(0, "x").standard_normal((4, 8, 8), dtype=np.float32)
        rng_a = stream(3, "r")
        got = repaint_step(zero_net, x_t, 5, src, mask, respaced, rng_a, "none")
        rng_b = stream(3, "r")
        eps = rng_b.standard_normal(src.shape, dtype=np.float32)
        assert np.array_equal(got, forward_sample(src, 4, eps, respaced))

    def test_final_step_known_is_source_bit_exact(self, respaced):
        src = stream(1, "src").uniform(-1, 1, (4, 8, 8)).astype(np.float32)
        mask = RepaintMask(m=np.ones((8, 8), np.float32), radius=0)
        x_t = stream(1, "x").standard_normal((4, 8, 8), dtype=np.float32)
        got = repaint_step(zero_net, x_t, 1, src, mask, respaced, stream(1, "r"), "none")
        assert np.array_equal(got, src)

    def test_all_unknown_equals_reverse_step(self, respaced):
        src = stream(2, "src").uniform(-1, 1, (4, 8, 8)).astype(np.float32)
        mask = RepaintMask(m=np.zeros((8, 8), np.float32), radius=0)
        x_t = stream(2, "x").standard_normal((4, 8, 8), dtype=np.float32)
        rng = stream(4, "r")
        got = repaint_step(zero_net, x_t, 5, src, mask, respaced, rng, "fixed-small")
        rng2 = stream(4, "r")
        rng2.standard_normal(src.shape, dtype=np.float32)  # known-noise draw comes first
        want = reverse_step(zero_net, x_t[None], 5, respaced, rng2, "fixed-small")[0]
        assert np.array_equal(got, want)

    def test_checkerboard_closed_form(self, respaced):
        src = stream(5, "src").uniform(-1, 1, (4, 8, 8)).astype(np.float32)
        board = np.indices((8, 8)).sum(axis=0) % 2
        mask = RepaintMask(m=board.astype(np.float32), radius=0)
        x_t = stream(5, "x").standard_normal((4, 8, 8), dtype=np.float32)
        rng = stream(5, "r")
        got = repaint_step(zero_net, x_t, 5, src, mask, respaced, rng, "none")
        rng2 = stream(5, "r")
        eps = rng2.standard_normal(src.shape, dtype=np.float32)
        known = forward_sample(src, 4, eps, respaced)
        unknown = x_t / np.float32(np.sqrt(respaced.alpha(5)))
        want = board * known + (1 - board) * unknown
        assert np.abs(got - want).max() < 1e-6

    def test_shape_mismatch(self, respaced):
        with pytest.raises(ValueError):
            repaint_step(
                zero_net,
                np.zeros((4, 8, 8), np.float32),
                3,
                np.zeros((4, 4, 4), np.float32),
                RepaintMask(m=np.ones((4, 4), np.float32), radius=0),
                respaced,
                stream(0, "r"),
            )

    def test_renoise_step_scaling(self, respaced):
        x = np.ones((4, 8, 8), np.float32)
        rng = stream(6, "r")
        got = renoise_step(x, 4, respaced, rng)
        rng2 = stream(6, "r")
        eps = rng2.standard_normal(x.shape, dtype=np.float32)
        b = respaced.beta(4)
        assert np.allclose(got, np.sqrt(1 - b) * x + np.sqrt(b) * eps, atol=1e-6)


def make_source(seed, size=16):
    rng = stream(seed, "mk")
    x = rng.uniform(-1, 1, (4, size, size)).astype(np.float32)
    mask = np.full((size, size), -1.0, dtype=np.float32)
    mask[5:9, 6:10] = 1.0
    x[3] = mask
    return x


@pytest.fixture(scope="module")
def tiny_registry(tmp_path_factory):
    d = tmp_path_factory.mktemp("reg")
    net = DenoiserNet.create(stream(0, "net"), base=8)
    net.save(d / "full.ckpt")
    net.save(d / "c0.ckpt")
    net.save(d / "c1.ckpt")
    return build_registry(
        {"a": 0, "b": 1},
        {0: "c0.ckpt", 1: "c1.ckpt"},
        full_checkpoint="full.ckpt",
        base_dir=d,
    )


class TestInpaint:
    def test_sample_count_and_known_region(self, tiny_registry, respaced):
        src = make_source(7)
        cfg = GenerationConfig(samples=3, dilation_radius=1, jump_len=2, resamples=2)
        outs, warnings = inpaint(tiny_registry, src, 0, cfg, stream(9, "g"), respaced)
        assert len(outs) == 3
        mask = binarize_and_dilate((src[3] + 1) / 2, 0.5, 1)
        for out in outs:
            keep = mask.m == 1.0
            assert np.array_equal(out[:, keep], src[:, keep])
            assert set(np.unique(out[3])) <= {-1.0, 1.0}
            # generated label region stays inside the dilated unknown region
            assert np.all((out[3] == 1.0) <= (mask.m == 0.0))

    def test_background_only_source_passes_through(self, tiny_registry, respaced):
        src = make_source(8)
        src[3] = -1.0
        cfg = GenerationConfig(samples=2, dilation_radius=1, jump_len=2, resamples=1)
        outs, warnings = inpaint(tiny_registry, src, 0, cfg, stream(10, "g"), respaced)
        assert len(outs) == 2
        assert any("no label region" in w for w in warnings)
        for out in outs:
            assert np.array_equal(out, src)

    def test_same_seed_reproducible_and_variants_differ(self, tiny_registry, respaced):
        src = make_source(9)
        cfg = GenerationConfig(samples=2, dilation_radius=1, jump_len=2, resamples=2)
        outs1, _ = inpaint(tiny_registry, src, 0, cfg, stream(11, "g"), respaced)
        outs2, _ = inpaint(tiny_registry, src, 0, cfg, stream(11, "g"), respaced)
        for a, b in zip(outs1, outs2):
            assert np.array_equal(a, b)
        unknown = binarize_and_dilate((src[3] + 1) / 2, 0.5, 1).m == 0.0
        assert not np.array_equal(outs1[0][:3][:, unknown], outs1[1][:3][:, unknown])

    def test_missing_checkpoint_names_cluster(self, tmp_path, respaced):
        reg = build_registry({"a": 0, "b": 1}, {0: "only0.ckpt"}, base_dir=tmp_path)
        src = make_source(10)
        cfg = GenerationConfig(samples=1, dilation_radius=1, jump_len=2, resamples=1)
        with pytest.raises(ValueError, match="cluster"):
            inpaint(reg, src, 0, cfg, stream(12, "g"), respaced)

    def test_walk_matches_plan_structure(self, tiny_registry, respaced):
        src = make_source(11)
        mask = binarize_and_dilate((src[3] + 1) / 2, 0.5, 1)
        plan = repaint_plan(respaced.start, 2, 2)
        net = tiny_registry.load_net("full")
        out = repaint_walk(net, src[None], [mask], plan, respaced, [stream(13, "w")])
        keep = mask.m == 1.0
        assert np.array_equal(out[0][:, keep], src[:, keep])

    def test_finalize_binarizes_and_clips(self):
        src = make_source(12)
        mask = RepaintMask(m=(src[3] < 0).astype(np.float32), radius=0)
        raw = np.full_like(src, 3.0)
        out = finalize_output(raw, src, mask)
        unknown = mask.m == 0.0
        assert np.all(out[:3][:, unknown] <= 1.0)
        assert set(np.unique(out[3])) <= {-1.0, 1.0}
