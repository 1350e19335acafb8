import math

import numpy as np
import pytest

from blackvid import autodiff as ad
from blackvid import distill
from blackvid.autodiff import MLP, Tape, Tensor
from blackvid.distill import (AdaLSConfig, TeacherBank, adals, ema_update,
                              init_teacher_bank, load_bank, loss_kd, loss_mi,
                              save_bank, total_objective)
from blackvid.errors import ConfigError, DataError, FormatError
from blackvid.rng import RngState

from helpers import (fd_max_rel_err, oracle_adals, oracle_ema, oracle_entropy,
                     oracle_kl, oracle_mi, random_simplex)


class TestAdals:
    def test_top1_of_three(self):
        out = adals(np.array([0.6, 0.3, 0.1]), AdaLSConfig(1, 3))
        assert np.allclose(out, [0.6, 0.2, 0.2], atol=1e-7)

    def test_uniform_unchanged(self):
        u = np.full(5, 0.2)
        for c in (1, 2, 4):
            assert np.allclose(adals(u, AdaLSConfig(c, 5)), u, atol=1e-7)

    def test_one_hot_preserved_with_paper_c(self):
        onehot = np.zeros(6)
        onehot[0] = 1.0
        out = adals(onehot, AdaLSConfig(3, 6))
        assert np.allclose(out, onehot, atol=1e-9)

    def test_c_not_below_class_count(self):
        with pytest.raises(ConfigError):
            AdaLSConfig(3, 3)
        with pytest.raises(ConfigError):
            AdaLSConfig(0, 3)

    def test_matches_oracle_and_keeps_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            c = int(rng.integers(3, 9))
            keep = int(rng.integers(1, c))
            p = random_simplex(rng, c)
            out = adals(p, AdaLSConfig(keep, c))
            assert np.allclose(out, oracle_adals(p.tolist(), keep), atol=1e-9)
            assert ad.is_prob_vector(out)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = random_simplex(rng, 6)
            cfg = AdaLSConfig(3, 6)
            once = adals(p, cfg)
            assert np.allclose(adals(once, cfg), once, atol=1e-12)

    def test_preserves_top_ranking_and_argmax(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = random_simplex(rng, 6)
            if p.max() < 1 / 6:
                continue
            out = adals(p, AdaLSConfig(3, 6))
            assert out.argmax() == p.argmax()
            top = np.argsort(-p, kind="stable")[:3]
            assert np.all(np.diff(out[top]) <= 1e-12) or np.all(np.diff(p[top]) <= 0)

    def test_tie_break_prefers_lower_index(self):
        p = np.array([0.25, 0.25, 0.25, 0.25])
        out = adals(p, AdaLSConfig(2, 4))
        # classes 0 and 1 kept verbatim, residual spread over 2 and 3
        assert np.allclose(out, [0.25, 0.25, 0.25, 0.25], atol=1e-9)
        p2 = np.array([0.4, 0.3, 0.3])
        out2 = adals(p2, AdaLSConfig(2, 3))
        assert np.allclose(out2, [0.4, 0.3, 0.3], atol=1e-9)


class TestTeacherBank:
    def test_init_applies_smoothing(self):
        preds = {"a": np.array([0.6, 0.3, 0.1], dtype=np.float32)}
        bank = init_teacher_bank(preds, AdaLSConfig(1, 3), gamma=0.6)
        assert np.allclose(bank.get("a"), [0.6, 0.2, 0.2], atol=1e-6)

    def test_empty_inputs_give_empty_bank(self):
        bank = init_teacher_bank({}, AdaLSConfig(3, 6), gamma=0.6)
        assert len(bank) == 0

    def test_missing_video_listed(self):
        with pytest.raises(DataError, match="v1.*v2|v2.*v1|v1"):
            init_teacher_bank({}, AdaLSConfig(1, 3), gamma=0.5, required_ids=["v1", "v2"])

    def test_three_videos_match_scalar_oracle(self):
        rng = np.random.default_rng(3)
        preds = {f"v{i}": random_simplex(rng, 4).astype(np.float32) for i in range(3)}
        bank = init_teacher_bank(preds, AdaLSConfig(2, 4), gamma=0.5)
        for vid, p in preds.items():
            assert np.allclose(bank.get(vid), oracle_adals(p.tolist(), 2), atol=1e-6)


class TestEmaUpdate:
    def test_gamma_one_keeps_bank(self):
        bank = TeacherBank(2, 1.0, {"a": np.array([0.8, 0.2], dtype=np.float32)})
        ema_update(bank, {"a": np.array([0.2, 0.8], dtype=np.float32)})
        assert np.allclose(bank.get("a"), [0.8, 0.2], atol=1e-6)

    def test_gamma_zero_takes_student(self):
        bank = TeacherBank(2, 0.0, {"a": np.array([0.8, 0.2], dtype=np.float32)})
        ema_update(bank, {"a": np.array([0.2, 0.8], dtype=np.float32)})
        assert np.allclose(bank.get("a"), [0.2, 0.8], atol=1e-6)

    def test_direct_arithmetic(self):
        bank = TeacherBank(2, 0.6, {"a": np.array([0.8, 0.2], dtype=np.float32)})
        ema_update(bank, {"a": np.array([0.2, 0.8], dtype=np.float32)})
        assert np.allclose(bank.get("a"), [0.56, 0.44], atol=1e-6)

    def test_id_mismatch(self):
        bank = TeacherBank(2, 0.6, {"a": np.array([0.5, 0.5], dtype=np.float32)})
        with pytest.raises(DataError):
            ema_update(bank, {"b": np.array([0.5, 0.5], dtype=np.float32)})

    def test_simplex_preserved_and_matches_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            c = int(rng.integers(2, 7))
            old = random_simplex(rng, c).astype(np.float32)
            new = random_simplex(rng, c).astype(np.float32)
            gamma = float(rng.uniform())
            bank = TeacherBank(c, gamma, {"v": old.copy()})
            ema_update(bank, {"v": new})
            got = bank.get("v")
            assert ad.is_prob_vector(got, tol=1e-6)
            assert np.allclose(got, oracle_ema(old.tolist(), new.tolist(), np.float32(gamma)),
                               atol=1e-5)


class TestLossKd:
    def _bank(self, rows):
        return TeacherBank(rows.shape[1], 0.6,
                           {f"v{i}": rows[i] for i in range(rows.shape[0])})

    def test_student_equals_teacher(self):
        rows = random_simplex(np.random.default_rng(5), 4, batch=3).astype(np.float32)
        bank = self._bank(rows)
        val = loss_kd(bank, ["v0", "v1", "v2"], Tensor(rows.copy()))
        assert val.item() == pytest.approx(0.0, abs=1e-6)

    def test_single_video_closed_form(self):
        bank = self._bank(np.array([[1.0, 0.0]], dtype=np.float32))
        val = loss_kd(bank, ["v0"], Tensor(np.array([[0.5, 0.5]])))
        assert val.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_missing_entry(self):
        bank = self._bank(np.array([[0.5, 0.5]], dtype=np.float32))
        with pytest.raises(DataError, match="v9"):
            loss_kd(bank, ["v9"], Tensor(np.array([[0.5, 0.5]])))

    def test_random_batch_matches_oracle(self):
        rng = np.random.default_rng(6)
        teachers = random_simplex(rng, 5, batch=8)
        students = random_simplex(rng, 5, batch=8)
        bank = self._bank(teachers.astype(np.float64))
        got = loss_kd(bank, [f"v{i}" for i in range(8)], Tensor(students)).item()
        expected = np.mean([oracle_kl(teachers[i], students[i]) for i in range(8)])
        assert got == pytest.approx(float(expected), abs=1e-8)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        teachers = random_simplex(rng, 4, batch=5)
        bank = self._bank(teachers)
        head = MLP([6, 8, 4], RngState(7), dtype=np.float64)
        x = rng.normal(size=(5, 6))

        def make_loss():
            return loss_kd(bank, [f"v{i}" for i in range(5)],
                           ad.softmax(head(Tensor(x))))

        err = fd_max_rel_err(make_loss, head.params(), rng, n_coords=40)
        assert err < 1e-3


class TestLossMi:
    def test_identical_predictions_zero(self):
        rows = np.tile(np.array([[0.2, 0.8]]), (6, 1))
        assert loss_mi(Tensor(rows)).item() == pytest.approx(0.0, abs=1e-7)

    def test_distinct_one_hots_reach_log_c(self):
        rows = np.eye(4)
        assert loss_mi(Tensor(rows)).item() == pytest.approx(math.log(4), abs=1e-6)

    def test_frozen_example(self):
        rows = np.array([[0.9, 0.1], [0.1, 0.9]])
        expected = math.log(2) - oracle_entropy([0.9, 0.1])
        assert expected == pytest.approx(0.3680, abs=1e-4)
        assert loss_mi(Tensor(rows)).item() == pytest.approx(expected, abs=1e-7)

    def test_bounds_and_oracle_on_random_batches(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            b, c = int(rng.integers(1, 9)), int(rng.integers(2, 7))
            rows = random_simplex(rng, c, batch=b)
            val = loss_mi(Tensor(rows)).item()
            assert -1e-9 <= val <= math.log(c) + 1e-9
            assert val == pytest.approx(oracle_mi(rows.tolist()), abs=1e-9)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            loss_mi(Tensor(np.zeros((0, 3))))


class TestTotalObjective:
    def test_beta_zero_switches_off_regularizers(self):
        val = total_objective(Tensor(np.float64(0.5)), Tensor(np.float64(9.0)),
                              Tensor(np.float64(3.0)), Tensor(np.float64(0.1)), 0.0)
        assert val.item() == pytest.approx(0.4, abs=1e-12)

    def test_paper_weighting_arithmetic(self):
        val = total_objective(Tensor(np.float64(0.5)), Tensor(np.float64(0.2)),
                              Tensor(np.float64(0.3)), Tensor(np.float64(0.1)), 1.0)
        assert val.item() == pytest.approx(0.9, abs=1e-12)

    def test_linear_in_each_part(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            kd, endo, exo, mi = rng.uniform(0, 2, size=4)
            beta = float(rng.uniform(0, 2))
            base = total_objective(Tensor(kd), Tensor(endo), Tensor(exo), Tensor(mi), beta).item()
            assert base == pytest.approx(kd + beta * (endo + exo) - mi, abs=1e-6)
            delta = 0.25
            bumped = total_objective(Tensor(kd), Tensor(endo), Tensor(exo),
                                     Tensor(mi + delta), beta).item()
            assert bumped == pytest.approx(base - delta, abs=1e-6)

    def test_gradient_reaches_all_parts(self):
        parts = [Tensor(np.float64(v), requires_grad=True) for v in (0.4, 0.2, 0.3, 0.1)]
        with Tape() as tape:
            val = total_objective(*parts, beta_reg=0.7)
            tape.backward(val)
        grads = [float(p.grad) for p in parts]
        assert grads == pytest.approx([1.0, 0.7, 0.7, -1.0])


class TestBankSnapshot:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        entries = {f"vid{i}": random_simplex(rng, 5).astype(np.float32) for i in range(7)}
        bank = TeacherBank(5, 0.75, entries)
        path = tmp_path / "bank.bvtb"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert loaded.num_classes == 5
        assert loaded.gamma == pytest.approx(0.75, abs=1e-7)
        assert set(loaded.entries) == set(entries)
        for vid in entries:
            assert np.array_equal(loaded.get(vid), entries[vid])

    def test_byte_stable(self, tmp_path):
        entries = {"a": np.array([0.5, 0.5], dtype=np.float32)}
        p1, p2 = tmp_path / "1.bvtb", tmp_path / "2.bvtb"
        save_bank(TeacherBank(2, 0.6, entries), p1)
        save_bank(load_bank(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bvtb"
        path.write_bytes(b"JUNKxxxx")
        with pytest.raises(FormatError):
            load_bank(path)
