import json
import shutil

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from mbdiff import pipeline as P
from mbdiff.audio import AudioSignal, load_wav, save_wav
from mbdiff.conditioner import Codebook, encode
from mbdiff.config import PipelineConfig
from mbdiff.eq import EqProfile


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("art")
    P.cmd_prepare(tiny_cfg, root)
    P.cmd_train(tiny_cfg, root)
    return root


def copy_of(src, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(src, dst)
    # synthesized items are indexed relative to the artifacts root
    return dst


class TestPrepare:
    def test_outputs(self, tiny_cfg, tmp_path):
        prep = P.cmd_prepare(tiny_cfg, tmp_path)
        index = json.loads((tmp_path / "index.json").read_text())
        assert len(index["items"]) == tiny_cfg.corpus.n_items
        for name in ("eq_profile.json", "codebook.json", "diffusion_bank.json", "manifest.json", "config.json"):
            assert (tmp_path / name).exists()
        assert all(len(x) == P.item_length(tiny_cfg) for x in prep.items)
        back = P.load_prepared(tiny_cfg, tmp_path)
        assert back.profile == prep.profile
        assert back.codebook.hash() == prep.codebook.hash()
        assert back.bank.hash() == prep.bank.hash()
        for a, b in zip(back.items, prep.items):
            assert_array_equal(a.samples, b.samples)

    def test_idempotent(self, tiny_cfg, tmp_path):
        P.cmd_prepare(tiny_cfg, tmp_path / "a")
        P.cmd_prepare(tiny_cfg, tmp_path / "b")
        for name in ("eq_profile.json", "codebook.json", "index.json", "manifest.json", "corpus/item003.wav"):
            assert P.file_sha256(tmp_path / "a" / name) == P.file_sha256(tmp_path / "b" / name)

    def test_seed_changes_corpus(self, tiny_cfg, tmp_path):
        a = P.cmd_prepare(tiny_cfg, tmp_path / "a", seed=1)
        b = P.cmd_prepare(tiny_cfg, tmp_path / "b", seed=2)
        assert not np.array_equal(a.items[0].samples, b.items[0].samples)

    def test_silent_corpus(self, tiny_cfg, tmp_path):
        corpus = tmp_path / "wavs"
        corpus.mkdir()
        for i in range(3):
            save_wav(AudioSignal(np.zeros(2048), 8000), corpus / f"s{i}.wav")
        with pytest.raises(P.DataError):
            P.cmd_prepare(tiny_cfg, tmp_path / "art", str(corpus))

    def test_empty_corpus_dir(self, tiny_cfg, tmp_path):
        (tmp_path / "wavs").mkdir()
        with pytest.raises(P.DataError):
            P.cmd_prepare(tiny_cfg, tmp_path / "art", str(tmp_path / "wavs"))

    def test_wav_corpus(self, tiny_cfg, tmp_path):
        corpus = tmp_path / "wavs"
        corpus.mkdir()
        r = np.random.default_rng(0)
        for i in range(4):
            save_wav(AudioSignal(0.2 * r.standard_normal(2048), 8000), corpus / f"n{i}.wav")
        prep = P.cmd_prepare(tiny_cfg, tmp_path / "art", str(corpus))
        assert prep.names == [f"n{i}.wav" for i in range(4)]

    def test_wrong_rate_corpus(self, tiny_cfg, tmp_path):
        corpus = tmp_path / "wavs"
        corpus.mkdir()
        save_wav(AudioSignal(np.ones(2048), 16000), corpus / "a.wav")
        with pytest.raises(P.DataError):
            P.cmd_prepare(tiny_cfg, tmp_path / "art", str(corpus))


class TestTrain:
    def test_loss_decreases(self, tiny_cfg, tmp_path):
        cfg = tiny_cfg.replace(**{"training.iters": 200})
        prep = P.cmd_prepare(cfg, tmp_path)
        for b in range(cfg.diffusion_bands.n_bands):
            s = P.smoothed(P.train_band(prep, b).losses, 50)
            assert s[-1] < s[0]

    def test_artifacts(self, trained, tiny_cfg):
        manifest = P.read_manifest(trained)
        for b in range(4):
            ck = trained / f"band{b}.ckpt"
            assert manifest["hashes"]["checkpoints"][str(b)] == P.file_sha256(ck)
            side = json.loads((trained / f"band{b}.ckpt.json").read_text())
            assert side["sigma_data"] > 0
            assert len(side["losses"]) == tiny_cfg.training.iters
            lines = (trained / f"band{b}_loss.csv").read_text().splitlines()
            assert lines[0] == "step,loss" and len(lines) == tiny_cfg.training.iters + 1

    def test_band_isolation(self, trained, tiny_cfg, tmp_path):
        root = copy_of(trained, tmp_path)
        before = {b: P.file_sha256(root / f"band{b}.ckpt") for b in range(4)}
        P.cmd_train(tiny_cfg.replace(**{"training.iters": 10}), root, band=2)
        after = {b: P.file_sha256(root / f"band{b}.ckpt") for b in range(4)}
        assert after[2] != before[2]
        assert all(after[b] == before[b] for b in (0, 1, 3))
        P.verify_manifest(P.load_prepared(tiny_cfg, root), P.read_manifest(root), range(4))

    def test_training_is_deterministic(self, trained, tiny_cfg, tmp_path):
        P.cmd_prepare(tiny_cfg, tmp_path)
        P.cmd_train(tiny_cfg, tmp_path, band=1)
        assert P.file_sha256(tmp_path / "band1.ckpt") == P.file_sha256(trained / "band1.ckpt")

    def test_parallel_matches_sequential(self, trained, tiny_cfg, tmp_path):
        P.cmd_prepare(tiny_cfg, tmp_path)
        P.cmd_train(tiny_cfg, tmp_path, jobs=2)
        for b in range(4):
            assert P.file_sha256(tmp_path / f"band{b}.ckpt") == P.file_sha256(trained / f"band{b}.ckpt")

    def test_resume_matches_uninterrupted(self, tiny_cfg, tmp_path):
        prep = P.cmd_prepare(tiny_cfg, tmp_path)
        full = P.train_band(prep, 0, iters=30).losses
        ref = P.file_sha256(tmp_path / "band0.ckpt")
        P.train_band(prep, 0, iters=12)
        resumed = P.train_band(prep, 0, iters=18, resume=True).losses
        assert resumed == full
        assert P.file_sha256(tmp_path / "band0.ckpt") == ref

    def test_bad_band(self, trained, tiny_cfg, tmp_path):
        with pytest.raises(P.DataError):
            P.cmd_train(tiny_cfg, copy_of(trained, tmp_path), band=7)

    def test_train_before_prepare(self, tiny_cfg, tmp_path):
        with pytest.raises(P.DataError):
            P.cmd_train(tiny_cfg, tmp_path)

    def test_nan_loss_reports_step(self, tiny_cfg, tmp_path, monkeypatch):
        prep = P.cmd_prepare(tiny_cfg, tmp_path)
        real = P.loss_and_grad
        calls = []

        def flaky(*args, **kw):
            calls.append(1)
            loss, g = real(*args, **kw)
            return (float("nan") if len(calls) == 3 else loss), g

        monkeypatch.setattr(P, "loss_and_grad", flaky)
        with pytest.raises(FloatingPointError, match="band 0, step 3"):
            P.train_band(prep, 0, iters=10)


class TestDecode:
    def test_same_seed_identical_bytes(self, trained, tiny_cfg, tmp_path):
        prep = P.load_prepared(tiny_cfg, trained)
        tok = encode(prep.items[0], prep.codebook)
        P.cmd_decode(tiny_cfg, trained, tmp_path / "a.wav", tokens=tok, seed=3)
        P.cmd_decode(tiny_cfg, trained, tmp_path / "b.wav", tokens=tok, seed=3)
        P.cmd_decode(tiny_cfg, trained, tmp_path / "c.wav", tokens=tok, seed=4)
        assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
        assert (tmp_path / "a.wav").read_bytes() != (tmp_path / "c.wav").read_bytes()

    def test_output_length(self, trained, tiny_cfg, tmp_path):
        y = P.cmd_decode(tiny_cfg, trained, tmp_path / "a.wav", wav=str(trained / "corpus" / "item000.wav"))
        assert len(y) == P.item_length(tiny_cfg)
        assert np.all(np.isfinite(y.samples))
        assert len(load_wav(tmp_path / "a.wav")) == len(y)

    def test_trained_model_uses_conditioning(self, trained, tiny_cfg):
        prep = P.load_prepared(tiny_cfg, trained)
        model = P.load_models(prep)[0]
        conds = [P.item_conditioning(prep, prep.items[i]) for i in (0, 1)]
        assert not np.array_equal(conds[0], conds[1])
        x = np.random.default_rng(0).standard_normal(P.item_length(tiny_cfg))
        gap = np.linalg.norm(model.predict(x, 10, conds[0]) - model.predict(x, 10, conds[1]))
        assert gap > 1e-3 * np.linalg.norm(model.predict(x, 10, conds[0]))

    def test_tampered_checkpoint(self, trained, tiny_cfg, tmp_path):
        root = copy_of(trained, tmp_path)
        blob = bytearray((root / "band1.ckpt").read_bytes())
        blob[-1] ^= 1
        (root / "band1.ckpt").write_bytes(bytes(blob))
        with pytest.raises(P.IntegrityError):
            P.cmd_decode(tiny_cfg, root, tmp_path / "o.wav", wav=str(root / "corpus" / "item000.wav"))

    def test_tampered_profile(self, trained, tiny_cfg, tmp_path):
        root = copy_of(trained, tmp_path)
        prof = EqProfile.load(root / "eq_profile.json")
        d = json.loads((root / "eq_profile.json").read_text())
        d["rho"] = 0.3
        (root / "eq_profile.json").write_text(json.dumps(d))
        assert EqProfile.load(root / "eq_profile.json").hash() != prof.hash()
        with pytest.raises(P.IntegrityError):
            P.cmd_decode(tiny_cfg, root, tmp_path / "o.wav", wav=str(root / "corpus" / "item000.wav"))

    def test_foreign_codebook_tokens(self, trained, tiny_cfg, tmp_path):
        prep = P.load_prepared(tiny_cfg, trained)
        other = Codebook(prep.codebook.centroids + 1.0, 256, 128, 8000)
        tok = encode(prep.items[0], other)
        with pytest.raises(P.IntegrityError):
            P.cmd_decode(tiny_cfg, trained, tmp_path / "o.wav", tokens=tok)

    def test_untrained_band(self, tiny_cfg, tmp_path):
        P.cmd_prepare(tiny_cfg, tmp_path)
        with pytest.raises(P.IntegrityError):
            P.cmd_decode(tiny_cfg, tmp_path, tmp_path / "o.wav", wav=str(tmp_path / "corpus" / "item000.wav"))


class TestEval:
    def test_identical_dirs(self, tmp_path):
        r = np.random.default_rng(0)
        for i in range(3):
            save_wav(AudioSignal(0.3 * r.standard_normal(4096), 8000), tmp_path / f"n{i}.wav")
        res = P.cmd_eval(tmp_path, tmp_path)
        assert [r[1:] for r in res.rows] == [(25.0, 25.0, 25.0, 25.0)] * 3
        assert res.missing == []

    def test_csv_and_table(self, trained, tmp_path):
        res = P.cmd_eval(trained / "corpus", trained / "corpus")
        res.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "file,mel_snr_l,mel_snr_m,mel_snr_h,mel_snr_a"
        assert lines[-1].startswith("MEAN,") and len(lines) == 8
        assert "ViSQOL: external, not computed" in res.table()

    def test_unpaired_listed(self, trained, tmp_path):
        rec = tmp_path / "rec"
        shutil.copytree(trained / "corpus", rec)
        (rec / "item000.wav").unlink()
        res = P.cmd_eval(trained / "corpus", rec)
        assert res.missing == ["item000.wav"]
        assert len(res.rows) == 5

    def test_empty_intersection(self, trained, tmp_path):
        (tmp_path / "rec").mkdir()
        with pytest.raises(P.DataError):
            P.cmd_eval(trained / "corpus", tmp_path / "rec")


def test_inspect_schedule(tiny_cfg):
    table, summary = P.cmd_inspect_schedule(PipelineConfig())
    rows = table.strip().splitlines()
    assert len(rows) == 1001
    ab = np.array([float(r.split(",")[2]) for r in rows[1:]])
    assert np.all(np.diff(ab) < 0)
    power = float(summary.split("=")[-1])
    _, cos = P.cmd_inspect_schedule(PipelineConfig().replace(**{"schedule.variant": "cosine"}))
    assert power > float(cos.split("=")[-1])

