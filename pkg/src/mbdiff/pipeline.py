"""End-to-end orchestration: prepare, train per band, decode tokens, evaluate.

Artifacts live in one directory::

    config.json          flat config snapshot
    index.json           corpus listing (paths, sample hashes, synth recipes)
    corpus/*.wav         synthesized items (float32), when no corpus dir is given
    eq_profile.json      EQ filterbank + band sigmas
    diffusion_bank.json  band-splitting filterbank for the diffusion models
    codebook.json        conditioning codebooks
    band{i}.ckpt(.json)  per-band denoiser checkpoints and sidecars
    band{i}_loss.csv     per-iteration training loss
    manifest.json        config, seeds and component hashes
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .audio import AudioSignal, RngStream, SynthSpec, load_wav, save_wav, synthesize
from .conditioner import Codebook, TokenSequence, embed, encode, extract_frames, fit_codebook
from .config import PipelineConfig
from .denoiser import (Model, OptimizerState, Preconditioner, init, load_checkpoint,
                       loss_and_grad, save_checkpoint, train_step)
from .diffusion import sample, training_batch
from .eq import SIGMA_FLOOR, EqProfile, deequalize, equalize, fit_profile
from .filterbank import FilterBank, design_bands, merge, split
from .metrics import MelConfig, mel_snr
from .schedule import make_schedule, subsample

log = logging.getLogger(__name__)

ARTIFACTS_ENV = "MBDIFF_ARTIFACTS"


class DataError(Exception):
    """Unusable input data (exit code 2)."""


class IntegrityError(Exception):
    """Artifact hash or geometry mismatch (exit code 3)."""


def artifacts_root(cfg: PipelineConfig, override: Optional[str] = None) -> Path:
    return Path(override or os.environ.get(ARTIFACTS_ENV) or cfg.paths.artifacts_dir)


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def schedule_for(cfg: PipelineConfig):
    s = cfg.schedule
    return make_schedule(s.variant, s.T, s.p, s.beta0, s.betaT, s.cosine_offset)


# --- corpus -----------------------------------------------------------------------


def item_length(cfg: PipelineConfig) -> int:
    c = cfg.conditioner
    return (cfg.corpus.n_frames - 1) * c.hop_samples + c.frame_len_samples


def synth_specs(cfg: PipelineConfig, rng: RngStream) -> list[SynthSpec]:
    """Random sine mixtures with log-uniform partial frequencies."""
    c = cfg.corpus
    specs = []
    lo, hi = np.log(c.f_min_hz), np.log(min(c.f_max_hz, 0.45 * cfg.sample_rate_hz))
    for _ in range(c.n_items):
        k = int(rng.integers(1, c.max_partials + 1))
        freqs = np.sort(np.exp(rng.uniform(lo, hi, k)))
        amps = rng.uniform(0.1, 0.5, k)
        phases = rng.uniform(0, 2 * np.pi, k)
        specs.append(SynthSpec(c.kind, {"frequencies": freqs.tolist(), "amplitudes": amps.tolist(),
                                        "phases": phases.tolist()}))
    return specs


def _load_corpus_dir(path: Path, sample_rate: int) -> list[tuple[str, AudioSignal]]:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise DataError(f"no .wav files in {path}")
    out = []
    for f in files:
        try:
            x = load_wav(f)
        except Exception as exc:
            raise DataError(f"cannot read {f}: {exc}") from exc
        if x.sample_rate != sample_rate:
            raise DataError(f"{f}: sample rate {x.sample_rate} != configured {sample_rate}")
        out.append((f.name, x))
    return out


# --- prepare -----------------------------------------------------------------------


@dataclass
class Prepared:
    cfg: PipelineConfig
    items: list
    names: list
    profile: EqProfile
    bank: FilterBank
    codebook: Codebook
    root: Path


def cmd_prepare(cfg: PipelineConfig, root, corpus_dir: Optional[str] = None, seed: Optional[int] = None) -> Prepared:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seed = cfg.training.seed if seed is None else seed
    rng = RngStream(seed)
    corpus_dir = corpus_dir or cfg.paths.corpus_dir or None
    index = []
    if corpus_dir:
        pairs = _load_corpus_dir(Path(corpus_dir), cfg.sample_rate_hz)
        for name, x in pairs:
            index.append({"name": name, "path": str(Path(corpus_dir) / name), "n_samples": len(x)})
        names = [n for n, _ in pairs]
        items = [x for _, x in pairs]
    else:
        cdir = root / "corpus"
        cdir.mkdir(exist_ok=True)
        n = item_length(cfg)
        items, names = [], []
        for i, spec in enumerate(synth_specs(cfg, rng.child(0))):
            x = synthesize(spec, n / cfg.sample_rate_hz, cfg.sample_rate_hz)
            name = f"item{i:03d}.wav"
            save_wav(x, cdir / name, "float32")
            x = load_wav(cdir / name)  # statistics see exactly the stored samples
            items.append(x)
            names.append(name)
            index.append({"name": name, "path": str(Path("corpus") / name), "n_samples": n, "synth": spec.to_dict()})
    for name, x in zip(names, items):
        if not np.any(x.samples):
            raise DataError(f"{name} is silent; band statistics would be degenerate")
        index[names.index(name)]["sha256"] = hashlib.sha256(x.samples.tobytes()).hexdigest()

    eq_bank = design_bands(cfg.sample_rate_hz, cfg.eq.n_bands, cfg.eq.kernel_len_taps)
    profile = fit_profile(items, eq_bank, rng.child(1), rho=cfg.eq.rho, n_noise=cfg.eq.noise_samples)
    if min(profile.sigma_data) <= SIGMA_FLOOR:
        raise DataError("corpus has empty EQ bands; band statistics are degenerate")
    bank = design_bands(cfg.sample_rate_hz, cfg.diffusion_bands.n_bands, cfg.diffusion_bands.kernel_len_taps)

    c = cfg.conditioner
    frames = np.concatenate([extract_frames(x, c.frame_len_samples, c.hop_samples, c.dim) for x in items])
    codebook, _ = fit_codebook(frames, c.K, c.n_books, c.kmeans_iters, rng.child(2),
                               c.frame_len_samples, c.hop_samples, cfg.sample_rate_hz)

    cfg.save(root / "config.json")
    with open(root / "index.json", "w") as fh:
        json.dump({"seed": seed, "items": index}, fh, indent=2, sort_keys=True)
    profile.save(root / "eq_profile.json")
    with open(root / "diffusion_bank.json", "w") as fh:
        json.dump(bank.to_dict(), fh, indent=2, sort_keys=True)
    codebook.save(root / "codebook.json")
    _write_manifest(root, cfg, seed, profile, bank, codebook, {})
    return Prepared(cfg, items, names, profile, bank, codebook, root)


def load_prepared(cfg: PipelineConfig, root) -> Prepared:
    root = Path(root)
    try:
        with open(root / "index.json") as fh:
            index = json.load(fh)
        profile = EqProfile.load(root / "eq_profile.json")
        with open(root / "diffusion_bank.json") as fh:
            bank = FilterBank.from_dict(json.load(fh))
        codebook = Codebook.load(root / "codebook.json")
    except FileNotFoundError as exc:
        raise DataError(f"missing prepare artifact: {exc.filename}") from exc
    items, names = [], []
    for entry in index["items"]:
        p = Path(entry["path"])
        items.append(load_wav(p if p.is_absolute() else root / p))
        names.append(entry["name"])
    return Prepared(cfg, items, names, profile, bank, codebook, root)


# --- manifest ---------------------------------------------------------------------


def _write_manifest(root: Path, cfg, seed, profile, bank, codebook, checkpoints: dict) -> dict:
    manifest = {
        "tool_version": __version__,
        "rng": RngStream.algorithm,
        "seed": seed,
        "config": cfg.to_flat(),
        "hashes": {
            "eq_profile": profile.hash(),
            "diffusion_bank": bank.hash(),
            "codebook": codebook.hash(),
            "checkpoints": checkpoints,
        },
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_manifest(root) -> dict:
    try:
        with open(Path(root) / "manifest.json") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no manifest in {root}; run prepare first") from exc


def verify_manifest(prep: Prepared, manifest: dict, bands: Sequence[int]) -> None:
    h = manifest["hashes"]
    checks = [("eq_profile", prep.profile.hash()), ("diffusion_bank", prep.bank.hash()), ("codebook", prep.codebook.hash())]
    for key, actual in checks:
        if h.get(key) != actual:
            raise IntegrityError(f"{key} hash {actual[:12]} differs from manifest {str(h.get(key))[:12]}")
    for b in bands:
        path = prep.root / f"band{b}.ckpt"
        expected = h["checkpoints"].get(str(b))
        if expected is None:
            raise IntegrityError(f"band {b} has no recorded checkpoint; train it first")
        if not path.exists() or file_sha256(path) != expected:
            raise IntegrityError(f"checkpoint for band {b} does not match the manifest")


# --- training ---------------------------------------------------------------------


def band_targets(prep: Prepared, band: int) -> list[np.ndarray]:
    """Band ``band`` of each equalized corpus item (EQ first, then split)."""
    out = []
    for x in prep.items:
        y = equalize(x, prep.profile)
        out.append(split(y, prep.bank)[band].samples.copy())
    return out


def item_conditioning(prep: Prepared, x: AudioSignal) -> np.ndarray:
    return embed(encode(x, prep.codebook), prep.codebook)


@dataclass
class TrainResult:
    band: int
    losses: list
    checkpoint: Path
    sha256: str


def smoothed(losses, window: int = 50) -> np.ndarray:
    a = np.asarray(losses, dtype=np.float64)
    if a.size < window:
        return a.copy()
    return np.convolve(a, np.ones(window) / window, mode="valid")


def train_band(prep: Prepared, band: int, iters: Optional[int] = None, resume: bool = False) -> TrainResult:
    """Train the denoiser for one frequency band.

    Each band draws from its own child stream of the training seed, so bands
    can be trained in any order or in separate processes.
    """
    from .conditioner import upsample_linear

    cfg = prep.cfg
    tc = cfg.training
    iters = tc.iters if iters is None else iters
    sched = schedule_for(cfg)
    m = cfg.denoiser.multiple
    seg = tc.segment_samples
    targets = band_targets(prep, band)
    conds = [upsample_linear(item_conditioning(prep, x), len(x) // m) for x in prep.items]
    lengths = np.array([len(t) for t in targets])
    if np.any(lengths < seg) or np.any(lengths % m):
        raise DataError(f"corpus items must be multiples of {m} samples and at least {seg} long")

    sigma_data = float(np.sqrt(np.mean(np.concatenate(targets) ** 2)))
    precond = Preconditioner(sched.alphas_bar, max(sigma_data, SIGMA_FLOOR)) if tc.precondition else None
    ckpt = prep.root / f"band{band}.ckpt"
    loss_path = prep.root / f"band{band}_loss.csv"
    root_rng = RngStream(tc.seed).child(100 + band)
    losses: list = []
    if resume and ckpt.exists():
        params, opt, side = load_checkpoint(ckpt)
        data_rng = RngStream(0)
        data_rng.set_state(side["rng_state"])
        losses = list(side.get("losses", []))
    else:
        params = init(cfg.denoiser, root_rng.child(0))
        opt = OptimizerState.create(params, lr=tc.lr)
        data_rng = root_rng.child(1)

    for _ in range(iters):
        idx = data_rng.integers(0, len(targets), tc.batch)
        offs = [int(data_rng.integers(0, (lengths[i] - seg) // m + 1)) * m for i in idx]
        x0 = np.stack([targets[i][o:o + seg] for i, o in zip(idx, offs)])
        cond = np.stack([conds[i][o // m:(o + seg) // m] for i, o in zip(idx, offs)])
        x_t, t, eps = training_batch(x0, sched, data_rng)
        try:
            loss, grads = loss_and_grad(params, x_t, t, eps, cond, precond)
        except FloatingPointError as exc:
            raise FloatingPointError(f"band {band}, step {opt.step + 1}: {exc}") from exc
        if not np.isfinite(loss):
            raise FloatingPointError(f"band {band}, step {opt.step + 1}: loss is {loss}")
        params, opt = train_step(params, opt, grads)
        losses.append(loss)
        if opt.step % 500 == 0:
            log.info("band %d step %d loss %.4f", band, opt.step, float(np.mean(losses[-50:])))

    meta = {
        "band": band,
        "seed": tc.seed,
        "schedule": sched.describe(),
        "eq_profile_hash": prep.profile.hash(),
        "filterbank_hash": prep.bank.hash(),
        "codebook_hash": prep.codebook.hash(),
        "sigma_data": precond.sigma_data if precond else None,
        "rng_state": data_rng.get_state(),
        "losses": losses,
    }
    digest = save_checkpoint(ckpt, params, opt, _json_safe(meta))
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i + 1, repr(v)) for i, v in enumerate(losses))
    return TrainResult(band, losses, ckpt, digest)


def _json_safe(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


def _train_worker(flat_cfg: dict, root: str, band: int, resume: bool):
    from .config import from_flat

    cfg = from_flat(flat_cfg)
    r = train_band(load_prepared(cfg, root), band, resume=resume)
    return r.band, r.losses, str(r.checkpoint), r.sha256


def cmd_train(cfg: PipelineConfig, root, band: Optional[int] = None, resume: bool = False,
              jobs: int = 1) -> list[TrainResult]:
    """Train all bands (or one) and record checkpoint hashes in the manifest.

    With ``jobs > 1`` bands train in separate processes. Results are
    byte-identical to a sequential run because every band owns its RNG stream
    and artifact paths.
    """
    prep = load_prepared(cfg, root)
    manifest = read_manifest(root)
    verify_manifest(prep, manifest, [])
    bands = list(range(cfg.diffusion_bands.n_bands)) if band is None else [band]
    for b in bands:
        if not 0 <= b < cfg.diffusion_bands.n_bands:
            raise DataError(f"band {b} outside 0..{cfg.diffusion_bands.n_bands - 1}")
    if jobs > 1 and len(bands) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_worker, cfg.to_flat(), str(root), b, resume) for b in bands]
            results = [TrainResult(b, losses, Path(ck), sha) for b, losses, ck, sha in (f.result() for f in futures)]
    else:
        results = [train_band(prep, b, resume=resume) for b in bands]
    for r in results:
        manifest["hashes"]["checkpoints"][str(r.band)] = r.sha256
    with open(Path(root) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return results


# --- decoding ---------------------------------------------------------------------


def load_models(prep: Prepared) -> list[Model]:
    sched = schedule_for(prep.cfg)
    models = []
    for b in range(prep.bank.n_bands):
        params, _, side = load_checkpoint(prep.root / f"band{b}.ckpt")
        sd = side.get("sigma_data")
        models.append(Model(params, None if sd is None else Preconditioner(sched.alphas_bar, sd)))
    return models


def decode_tokens(prep: Prepared, models: Sequence[Model], tokens: TokenSequence, steps: int,
                  seed: int, zero_cond: bool = False, skip_above: Optional[int] = None) -> AudioSignal:
    """Sample every band independently, merge, then undo the EQ."""
    if tokens.codebook_hash and tokens.codebook_hash != prep.codebook.hash():
        raise IntegrityError("token file was produced with a different codebook")
    if (tokens.frame_len, tokens.hop, tokens.sample_rate) != (prep.codebook.frame_len, prep.codebook.hop,
                                                              prep.codebook.sample_rate):
        raise IntegrityError("token frame geometry does not match the codebook")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cond = embed(tokens, prep.codebook)
    if zero_cond:
        cond = np.zeros_like(cond)
    n = tokens.n_samples
    sched = schedule_for(prep.cfg)
    plan = subsample(sched.T, steps)
    skip = prep.cfg.schedule.skip_above if skip_above is None else skip_above
    rng = RngStream(seed)
    bands = []
    for b, model in enumerate(models):
        band_rng = rng.child(b)
        x = sample(model, cond, sched, plan, rng=band_rng, shape=(n,), skip_above=skip)
        bands.append(AudioSignal(x, prep.cfg.sample_rate_hz))
    return deequalize(merge(bands), prep.profile)


def cmd_decode(cfg: PipelineConfig, root, out_path, tokens: Optional[TokenSequence] = None,
               wav: Optional[str] = None, steps: Optional[int] = None, seed: int = 0,
               zero_cond: bool = False) -> AudioSignal:
    prep = load_prepared(cfg, root)
    manifest = read_manifest(root)
    verify_manifest(prep, manifest, range(prep.bank.n_bands))
    if tokens is None:
        if wav is None:
            raise DataError("need a token file or a wav to re-encode")
        x = load_wav(wav)
        if x.sample_rate != cfg.sample_rate_hz:
            raise IntegrityError(f"{wav}: sample rate {x.sample_rate} != {cfg.sample_rate_hz}")
        tokens = encode(x, prep.codebook)
    y = decode_tokens(prep, load_models(prep), tokens, steps or cfg.sampling.steps, seed, zero_cond)
    save_wav(y, out_path, "float32")
    return y


# --- evaluation ---------------------------------------------------------------------


@dataclass
class EvalResult:
    rows: list  # (name, L, M, H, A)
    missing: list

    def mean(self) -> list:
        return np.mean([r[1:] for r in self.rows], axis=0).tolist()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "mel_snr_l", "mel_snr_m", "mel_snr_h", "mel_snr_a"])
            for r in self.rows:
                w.writerow([r[0]] + [f"{v:.4f}" for v in r[1:]])
            w.writerow(["MEAN"] + [f"{v:.4f}" for v in self.mean()])

    def table(self) -> str:
        lines = [f"{'file':<24} {'Mel-SNR-L':>10} {'Mel-SNR-M':>10} {'Mel-SNR-H':>10} {'Mel-SNR-A':>10}"]
        for r in self.rows + [("MEAN", *self.mean())]:
            lines.append(f"{r[0]:<24} " + " ".join(f"{v:>10.2f}" for v in r[1:]))
        lines.append("ViSQOL: external, not computed")
        return "\n".join(lines)


def cmd_eval(ref_dir, rec_dir, mel_cfg: MelConfig = MelConfig()) -> EvalResult:
    ref_dir, rec_dir = Path(ref_dir), Path(rec_dir)
    refs = {p.name for p in ref_dir.glob("*.wav")}
    recs = {p.name for p in rec_dir.glob("*.wav")}
    common = sorted(refs & recs)
    if not common:
        raise DataError("no matching file names between reference and reconstruction dirs")
    rows = []
    for name in common:
        r = mel_snr(load_wav(ref_dir / name), load_wav(rec_dir / name), mel_cfg)
        rows.append((name, *r.as_row()))
    return EvalResult(rows, sorted(refs ^ recs))


def corpus_mel_snr(prep: Prepared, models, indices, steps: int, seed: int, zero_cond: bool = False,
                   mel_cfg: MelConfig = MelConfig()) -> list[float]:
    """Mel-SNR-A of decoded corpus items against their originals."""
    out = []
    for i in indices:
        x = prep.items[i]
        y = decode_tokens(prep, models, encode(x, prep.codebook), steps, seed + i, zero_cond)
        n = min(len(x), len(y))
        out.append(mel_snr(x.with_samples(x.samples[:n]), y.with_samples(y.samples[:n]), mel_cfg).snr_avg)
    return out


def cmd_inspect_schedule(cfg: PipelineConfig) -> tuple[str, str]:
    sched = schedule_for(cfg)
    frac = sched.fraction_above(0.99)
    summary = f"# variant={sched.variant[0]} T={sched.T} fraction(alpha_bar>0.99)={frac:.4f}"
    return sched.to_csv(), summary
