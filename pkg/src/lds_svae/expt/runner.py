"""Experiment orchestration: generate, train, evaluate, forecast, write results.

A run directory holds::

    data/            generated dataset (only when no dataset was supplied)
    metrics.csv      one row per epoch, appended as training proceeds
    run.log          log records of the run (no timestamps)
    checkpoint.json  final model, optimizer and rng state
    result.json      RunResult without wall-clock timings
    timings.json     wall-clock seconds per stage

Everything except ``timings.json`` is a deterministic function of the config,
the seed and the thread count.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from contextlib import contextmanager
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .. import __version__
from ..inference import smooth
from ..lgssm import exact_mll, null_model_mll
from ..svae.checkpoint import atomic_write_text, save_checkpoint
from ..svae.forecast import predict_forecast
from ..svae.model import SvaeModel, encode, init_model
from ..svae.training import evaluate_elbo, train
from .config import EvalConfig, ExperimentConfig
from .datasets import Dataset, gen_lds_dataset, gen_pendulum_dataset, truth_models
from .io import read_dataset, write_dataset
from .metrics import linear_decode_r2, normalized_elbo

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "iterations", "train_elbo", "val_elbo", "skipped", "spectral_radius")


class RunResult(NamedTuple):
    config: dict
    history: list[dict]
    final: dict
    timings: dict
    seed: int
    version: str

    def to_json(self) -> dict:
        """The deterministic part of the result (timings are stored separately)."""
        return {
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "final": self.final,
            "history": self.history,
        }


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"


def generate(cfg: ExperimentConfig) -> Dataset:
    data_cfg = cfg.dataset_config()
    if cfg.kind == "pendulum":
        return gen_pendulum_dataset(data_cfg)
    return gen_lds_dataset(data_cfg)


# --- evaluation --------------------------------------------------------------
def posterior_means(model: SvaeModel, y: torch.Tensor, backend: str | None = None,
                    threads: int | None = None) -> np.ndarray:
    """Smoothed latent means given all frames, shape ``(n, T, D)``."""
    with torch.no_grad():
        psi = encode(model.encoder(), y)
        post = smooth(model.prior(), psi, backend or model.config.backend, threads)
    return post.smoothed.mean.numpy()


def evaluate(model: SvaeModel, ds: Dataset, ecfg: EvalConfig, backend: str | None = None,
             threads: int | None = None) -> dict:
    """Unmasked ELBO on ``ecfg.split`` plus dataset-specific metrics.

    LDS data: true/null log-likelihoods and the normalized ELBO.  Pendulum
    data: held-out R^2 of linear decoders (fit on the train split) from
    smoothed latents to the angle, as a (sin, cos) pair, and to the velocity.
    """
    split = ds.splits[ecfg.split]
    y = torch.from_numpy(split.y)
    n, T, N = y.shape
    per = evaluate_elbo(model, y, seed=ecfg.seed, backend=backend, threads=threads, batch_size=ecfg.batch_size)
    out = {"split": ecfg.split, "elbo_per_frame_dim": per, "elbo_total": per * n * T * N}
    if ds.kind == "lds" and ds.truth is not None:
        theta, emission = truth_models(ds.truth)
        true = float(exact_mll(theta, emission, y).sum())
        null = float(null_model_mll(theta, emission, y).sum())
        out.update(true_mll=true, null_mll=null, normalized_elbo=normalized_elbo(out["elbo_total"], null, true))
    if ds.kind == "pendulum":
        train_split = ds.splits["train"]
        z_fit = posterior_means(model, torch.from_numpy(train_split.y), backend, threads)
        z_eval = posterior_means(model, y, backend, threads)
        D = z_fit.shape[-1]

        def pooled(a):
            return a.reshape(-1, *a.shape[2:])

        ang_fit, ang_eval = train_split.latents["angle"], split.latents["angle"]
        angle = linear_decode_r2(
            pooled(z_fit), np.stack([np.sin(ang_fit), np.cos(ang_fit)], -1).reshape(-1, 2),
            pooled(z_eval), np.stack([np.sin(ang_eval), np.cos(ang_eval)], -1).reshape(-1, 2),
        )
        vel = linear_decode_r2(
            pooled(z_fit), train_split.latents["velocity"].reshape(-1),
            pooled(z_eval), split.latents["velocity"].reshape(-1),
        )
        out.update(latent_dim=D, r2_angle=angle.r2, r2_velocity=vel.r2,
                   r2_rank_deficient=angle.rank_deficient or vel.rank_deficient)
    return out


def forecast(model: SvaeModel, ds: Dataset, ecfg: EvalConfig, backend: str | None = None) -> dict:
    """Mean predictive log-likelihood of ``horizon`` frames given ``prefix`` frames."""
    y = torch.from_numpy(ds.splits[ecfg.split].y)
    n, T, N = y.shape
    if ecfg.prefix + ecfg.horizon > T:
        raise ValueError(f"prefix + horizon = {ecfg.prefix + ecfg.horizon} exceeds T = {T}")
    rng = np.random.default_rng(ecfg.seed)
    ll, per, se = [], [], []
    # one sequence at a time keeps the (trajectories, horizon, N) decode small
    for i in range(n):
        res = predict_forecast(model, y[i], ecfg.prefix, ecfg.horizon, ecfg.trajectories, rng, backend)
        ll.append(float(res.log_lik))
        per.append(float(res.per_frame_dim))
        se.append(float(res.stderr))
    return {
        "split": ecfg.split,
        "prefix": ecfg.prefix,
        "horizon": ecfg.horizon,
        "trajectories": ecfg.trajectories,
        "pred_log_lik": float(np.mean(ll)),
        "pred_ll_per_frame_dim": float(np.mean(per)),
        "pred_stderr": float(math.sqrt(np.sum(np.square(se))) / n),
        "pred_log_lik_per_seq": ll,
    }


# --- orchestration ------------------------------------------------------------
class _CsvLog:
    def __init__(self, path: Path):
        self.path = path
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(CSV_FIELDS)

    def __call__(self, record: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([record.get(k, "") for k in CSV_FIELDS])


@contextmanager
def _file_log(path: Path):
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("lds_svae")
    old_level = root.level
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        yield
    finally:
        root.removeHandler(handler)
        root.setLevel(old_level)
        handler.close()


def run_experiment(cfg: ExperimentConfig, out, data=None, threads: int | None = None,
                   forecast_enabled: bool | None = None) -> RunResult:
    """Generate (or load) data, train, evaluate and forecast; write results under ``out``.

    ``data`` is a dataset directory or a :class:`Dataset`; when omitted the
    dataset is generated from ``cfg`` and written to ``out/data``.  Forecasting
    runs whenever sequences are long enough for the configured protocol,
    unless ``forecast_enabled`` says otherwise.  A failing stage raises
    :class:`ExperimentError`; files written so far are kept.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    stage = "setup"

    @contextmanager
    def timed(name):
        nonlocal stage
        stage = name
        log.info("stage %s", name)
        t0 = time.perf_counter()
        yield
        timings[name] = time.perf_counter() - t0

    with _file_log(out / "run.log"):
        try:
            with timed("generate"):
                if data is None:
                    ds = generate(cfg)
                    write_dataset(ds, out / "data")
                elif isinstance(data, Dataset):
                    ds = data
                else:
                    ds = read_dataset(data)
            tr = ds.splits["train"]
            mcfg = cfg.model_config(obs_dim=tr.y.shape[-1])
            tcfg = cfg.train_config()
            ecfg = cfg.eval_config()
            with timed("train"):
                model0 = init_model(mcfg, np.random.default_rng(cfg.seed))
                val = ds.splits.get("val")
                res = train(model0, torch.from_numpy(tr.y), None if val is None else torch.from_numpy(val.y),
                            tcfg, callback=_CsvLog(out / "metrics.csv"))
                save_checkpoint(out / "checkpoint.json", res.model, res.adam, res.rng_state,
                                extra={"experiment": cfg.to_dict(), "version": __version__})
            with timed("eval"):
                final = evaluate(res.model, ds, ecfg, tcfg.backend, threads)
            T = tr.y.shape[1]
            do_forecast = ecfg.prefix + ecfg.horizon <= T if forecast_enabled is None else forecast_enabled
            if do_forecast:
                with timed("predict"):
                    final["forecast"] = forecast(res.model, ds, ecfg, tcfg.backend)
        except Exception as exc:
            log.error("stage %s failed: %s", stage, exc)
            atomic_write_text(out / "timings.json", dumps(timings))
            raise ExperimentError(stage, exc) from exc

    result = RunResult(
        config={"experiment": cfg.to_dict(), "model": mcfg.to_dict(), "train": tcfg.to_dict(),
                "eval": ecfg.__dict__.copy(), "dataset": ds.config},
        history=res.history,
        final=final,
        timings=timings,
        seed=cfg.seed,
        version=__version__,
    )
    atomic_write_text(out / "result.json", dumps(result.to_json()))
    atomic_write_text(out / "timings.json", dumps(timings))
    return result


ABLATION_FRACTIONS = (0.4, 0.0)


def run_ablation(cfg: ExperimentConfig, out, data=None, threads: int | None = None) -> dict:
    """Paired runs with and without masking, identical in everything else.

    Writes ``mask_0.4/`` and ``mask_0.0/`` run directories and a summary
    ``ablation.json`` holding both runs' final metrics.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = generate(cfg)
        write_dataset(data, out / "data")
    runs = {}
    for frac in ABLATION_FRACTIONS:
        sub = cfg.with_overrides({"train.mask_fraction": frac})
        runs[f"mask_{frac}"] = run_experiment(sub, out / f"mask_{frac}", data, threads).final
    summary = {"mask_fractions": list(ABLATION_FRACTIONS), "runs": runs}
    atomic_write_text(out / "ablation.json", dumps(summary))
    return summary
