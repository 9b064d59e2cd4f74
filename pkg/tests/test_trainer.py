import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glyphmatch.encoder import build_glyph_line
from glyphmatch.model import GlyphMatcher
from glyphmatch.rng import Prng
from glyphmatch.synth import FontAtlas, gen_font, render_line
from glyphmatch.tensor import Tensor
from glyphmatch.trainer import (
    Checkpoint, CheckpointError, SimTargets, TrainConfig, Trainer, checkpoint_bytes, fnv1a64, load_checkpoint,
    save_checkpoint, sim_loss, sim_targets, total_loss, train,
)
from glyphmatch.ctc import ctc_loss

from helpers import full_model_gradcheck

TINY = dict(batch_size=2, fonts_per_batch=1, alphabet="abcde", max_len=6, min_len=2, val_lines=1)
TEXTS = ["abc de", "bad cab", "dead bee", "ace cad", "bead"]


def two_glyph_line():
    glyphs = {"a": np.ones((32, 12), np.float32) * 0.5, "b": np.ones((32, 14), np.float32) * 0.7}
    font = FontAtlas("t", "regular", glyphs)
    return font, build_glyph_line(font, "ab")


class TestSimTargets:
    def test_worked_example(self):
        font, gl = two_glyph_line()
        targets = sim_targets(render_line(font, "ab"), gl)
        assert targets.chars == ["a"] * 6 + ["b"] * 7
        assert targets.spans[0] == (0, 6) and targets.spans[-1] == (6, 13)

    def test_single_character(self):
        font, gl = two_glyph_line()
        assert set(sim_targets(render_line(font, "b"), gl).chars) == {"b"}

    @given(st.text("ab", min_size=1, max_size=10))
    def test_partition(self, text):
        font, gl = two_glyph_line()
        s = render_line(font, text)
        targets = sim_targets(s, gl)
        expected = []
        for ch, (a, b) in zip(text, s.boxes):
            expected += [ch] * sum(1 for j in range(s.width // 2) if a <= 2 * j + 1 < b)
        assert targets.chars == expected and len(expected) == s.width // 2

    def test_unknown_character(self):
        font, gl = two_glyph_line()
        font.glyphs["z"] = np.zeros((32, 12), np.float32)
        with pytest.raises(KeyError):
            sim_targets(render_line(font, "az"), gl)


class TestSimLoss:
    def test_saturated_margin_is_zero(self):
        targets = SimTargets(["a", "b"], [(0, 3), (3, 8)])
        S = np.full((10, 2), -100.0)
        S[0:3, 0] = 100.0
        S[3:8, 1] = 100.0
        assert float(sim_loss(Tensor(S), targets).data) == pytest.approx(0.0, abs=1e-3)

    def test_uniform_closed_form(self):
        targets = SimTargets(["a"] * 4, [(0, 5)] * 4)
        assert float(sim_loss(Tensor(np.zeros((40, 4))), targets).data) == pytest.approx(math.log(40) - math.log(5))

    def test_row_mode_uniform(self):
        targets = SimTargets(["a", "a", "b"], [(0, 2), (0, 2), (2, 4)])
        out = float(sim_loss(Tensor(np.zeros((6, 3))), targets, mode="row").data)
        # rows 0-1 target two of three columns, rows 2-3 target one
        assert out == pytest.approx((2 * math.log(3 / 2) + 2 * math.log(3)) / 4)

    @given(st.integers(0, 10**6))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        S = r.uniform(-1, 1, (8, 5))
        targets = SimTargets(["x"] * 5, [(a, a + 2) for a in r.integers(0, 6, 5)])
        assert float(sim_loss(Tensor(S), targets, scale=10.0).data) >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sim_loss(Tensor(np.zeros((4, 3))), SimTargets(["a"], [(0, 1)]))


class TestTotalLoss:
    @pytest.fixture
    def parts(self, rng):
        z = rng.normal(size=(6, 3))
        lp = Tensor(z - np.logaddexp.reduce(z, axis=1, keepdims=True))
        S = Tensor(rng.uniform(-1, 1, (4, 6)))
        return lp, S, [0, 1], SimTargets(["a"] * 6, [(0, 2)] * 6)

    def test_lambda_zero_is_ctc_alone(self, parts):
        lp, S, target, targets = parts
        out = total_loss(lp, S, target, targets, lam=0.0)
        assert float(out.total.data) == float(ctc_loss(lp, target).data)

    def test_linear_in_lambda(self, parts):
        lp, S, target, targets = parts
        values = [float(total_loss(lp, S, target, targets, lam=lam).total.data) for lam in (0.0, 1.0, 2.0)]
        assert values[2] - values[1] == pytest.approx(values[1] - values[0], rel=1e-9)
        assert min(values) >= 0

    def test_infeasible_target_keeps_similarity_term(self, parts):
        lp, S, _, targets = parts
        out = total_loss(lp, S, [0, 0, 0, 0], targets, lam=1.0)
        assert math.isnan(out.pred)
        assert float(out.total.data) == pytest.approx(float(sim_loss(S, targets).data))

    def test_warm_up_reports_but_skips_ctc(self, parts):
        lp, S, target, targets = parts
        out = total_loss(lp, S, target, targets, ctc_weight=0.0)
        assert out.pred == pytest.approx(float(ctc_loss(lp, target).data))
        assert float(out.total.data) == pytest.approx(out.sim)

    def test_mean_reduction_divides_by_target_length(self, parts):
        lp, S, target, targets = parts
        out = total_loss(lp, S, target, targets, lam=0.0, ctc_reduction="mean")
        assert float(out.total.data) == pytest.approx(float(ctc_loss(lp, target).data) / len(target))

    def test_negative_lambda(self, parts):
        with pytest.raises(ValueError):
            total_loss(*parts, lam=-1.0)

    def test_composed_model_gradients(self):
        errors = full_model_gradcheck(10, seed=3, step=1e-5)
        bad = [e for e in errors if e[3] >= 1e-2]
        assert not bad, bad


class TestCheckpoint:
    @pytest.fixture(scope="class")
    @staticmethod
    def ckpt():
        trainer = Trainer(TrainConfig(iters=1, **TINY), [gen_font(1, "abcde")], TEXTS)
        trainer.step()
        return trainer.checkpoint()

    def test_save_load_save_identical(self, ckpt, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", loaded)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.iteration == 1 and loaded.adam.t == 1

    def test_forward_identical_after_reload(self, ckpt, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        font = gen_font(2, "abcde")
        gl = build_glyph_line(font, "abcde")
        img = render_line(font, "bead").image
        before = ckpt.model().log_probs(img, gl)
        after = load_checkpoint(tmp_path / "a.ckpt").model().log_probs(img, gl)
        assert np.array_equal(before, after)

    def test_tensors_sorted_by_name(self, ckpt):
        data = checkpoint_bytes(ckpt)
        names, pos = [], 16 + 4
        for _ in range(len(ckpt.params)):
            n = int.from_bytes(data[pos : pos + 2], "little")
            names.append(data[pos + 2 : pos + 2 + n].decode())
            pos += 2 + n
            ndim = data[pos + 1]
            shape = [int.from_bytes(data[pos + 2 + 4 * i : pos + 6 + 4 * i], "little") for i in range(ndim)]
            pos += 2 + 4 * ndim + 4 * int(np.prod(shape))
        assert names == sorted(ckpt.params)

    @pytest.mark.parametrize("offset", [0, 5])
    def test_corrupt_header_rejected(self, ckpt, tmp_path, offset):
        data = bytearray(checkpoint_bytes(ckpt))
        data[offset] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_truncated_rejected(self, ckpt, tmp_path):
        (tmp_path / "t.ckpt").write_bytes(checkpoint_bytes(ckpt)[:1000])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_version_mismatch_rejected(self, ckpt, tmp_path):
        other = Checkpoint(ckpt.iteration, ckpt.params, ckpt.adam, ckpt.config, ckpt.extra, version=2)
        save_checkpoint(tmp_path / "v.ckpt", other)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_fnv_reference_values(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=-1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=5, fonts_per_batch=2)
        assert TrainConfig(decoder={"n_layers": 1}).decoder.n_layers == 1

    def test_batches_depend_only_on_step(self):
        fonts = [gen_font(1, "abcde"), gen_font(2, "abcde")]
        a = Trainer(TrainConfig(**TINY), fonts, TEXTS)
        b = Trainer(TrainConfig(**TINY), list(reversed(fonts)), TEXTS)
        for step in (0, 7):
            for (ga, sa), (gb, sb) in zip(a.batch(step), b.batch(step)):
                assert ga.chars == gb.chars and [s.text for s in sa] == [s.text for s in sb]
                assert all(np.array_equal(x.image, y.image) for x, y in zip(sa, sb))

    def test_loss_log_reproducible(self, tmp_path):
        cfg = TrainConfig(iters=3, val_every=3, **TINY)
        fonts = [gen_font(1, "abcde")]
        train(cfg, fonts, TEXTS, val_texts=TEXTS, out_dir=tmp_path / "a")
        train(cfg, fonts, TEXTS, val_texts=TEXTS, out_dir=tmp_path / "b")
        log_a = (tmp_path / "a" / "loss.log").read_bytes()
        assert log_a == (tmp_path / "b" / "loss.log").read_bytes()
        assert len(log_a.splitlines()) == 3
        assert (tmp_path / "a" / "best.ckpt").is_file()

    def test_resume_continues_identically(self, tmp_path):
        cfg = TrainConfig(iters=4, val_every=0, **TINY)
        fonts = [gen_font(1, "abcde")]
        straight = Trainer(cfg, fonts, TEXTS)
        full = [straight.step().line() for _ in range(4)]
        first = Trainer(cfg, fonts, TEXTS)
        first.step(), first.step()
        save_checkpoint(tmp_path / "mid.ckpt", first.checkpoint())
        resumed = Trainer(cfg, fonts, TEXTS, resume=load_checkpoint(tmp_path / "mid.ckpt"))
        assert [resumed.step().line() for _ in range(2)] == full[2:]

    def test_warm_up_and_ramp_schedule(self):
        trainer = Trainer(TrainConfig(ctc_warmup=3, ctc_ramp=4, **TINY), [gen_font(1, "abcde")], TEXTS)
        ramp = [0, 0, 0, 0.25, 0.5, 0.75, 1, 1, 1]
        assert [trainer.ctc_weight(i) for i in range(9)] == ramp
        assert [trainer.decoder_lr_scale(i) for i in range(9)] == ramp

    def test_without_warm_up_ctc_has_full_weight(self):
        trainer = Trainer(TrainConfig(lam=0.0, ctc_ramp=4, **TINY), [gen_font(1, "abcde")], TEXTS)
        assert trainer.ctc_weight(0) == 1.0 and trainer.decoder_lr_scale(0) == 0.25

    def test_warm_up_leaves_decoder_untouched(self):
        cfg = TrainConfig(iters=2, ctc_warmup=2, **TINY)
        trainer = Trainer(cfg, [gen_font(1, "abcde")], TEXTS)
        before = {k: p.data.copy() for k, p in trainer.model.params.items()}
        trainer.step()
        moved = {k for k, p in trainer.model.params.items() if not np.array_equal(p.data, before[k])}
        assert moved and all(k.startswith("enc.") for k in moved)

    @pytest.mark.slow
    def test_smoke_training_halves_ctc(self):
        alphabet = "abcd "
        prng = Prng(0)
        texts = [" ".join("".join(prng.choice("abcd") for _ in range(prng.randint(1, 5)))
                          for _ in range(3)) for _ in range(200)]
        cfg = TrainConfig(iters=200, alphabet=alphabet, max_len=8, min_len=3, batch_size=4, fonts_per_batch=1,
                          val_every=0, seed=0)
        trainer = Trainer(cfg, [gen_font(11, alphabet)], texts)
        losses = [trainer.step().pred for _ in range(200)]
        start = losses[9]
        end = float(np.mean(losses[-10:]))
        print(f"ctc at iteration 10: {start:.3f}; mean of last 10: {end:.3f}")
        assert end <= 0.5 * start
