"""Command-line pipeline: generate, train, forecast, evaluate, pipeline.

Configuration is a flat key=value file plus CLI flag overrides (flags win).
Every command is deterministic given (config, seed, input files) and writes
only under its --out directory.  Logs are line-oriented key=value records.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
"""

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint, data, evaluation, seqmodels, timegrad
from .errors import ParameterError, TrainingError, ValidationError
from .evaluation import ForecastEnsemble, MetricsReport, SiteMetrics
from .optim import AdamW

MODEL_KINDS = ("timegrad", "informer", "vanilla")
GROUPINGS = ("all_sites_oil", "oil_water_per_site", "oil_only_pairs")
DEFAULT_EPOCHS = {"timegrad": 40, "informer": 9, "vanilla": 40}


def log(**kw) -> None:
    print(" ".join(f"{k}={v}" for k, v in kw.items()))


@dataclass
class RunConfig:
    command: str = ""
    model: str = "informer"
    data: str = ""
    synthetic_config: str = ""
    grouping: str = "all_sites_oil"
    horizon: int = 45
    samples: int = 100
    epochs: int = -1          # -1: per-model default
    seed: int = 42
    out: str = "runs"
    checkpoint: str = ""
    quantile: float = 0.5
    windows_per_epoch: int = 64
    lr: float = 1e-4
    context_length: int = 90  # timegrad context window
    enc_length: int = 96      # transformer encoder context
    token_length: int = 48

    def validate(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ParameterError(f"model must be one of {MODEL_KINDS}")
        if self.grouping not in GROUPINGS:
            raise ParameterError(f"grouping must be one of {GROUPINGS}")
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        if self.samples < 1:
            raise ParameterError("samples must be >= 1")
        if not 0.0 <= self.quantile <= 1.0:
            raise ParameterError("quantile must lie in [0, 1]")

    @property
    def effective_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.model] if self.epochs < 0 else self.epochs


_INT_FIELDS = {"horizon", "samples", "epochs", "seed", "windows_per_epoch",
               "context_length", "enc_length", "token_length"}
_FLOAT_FIELDS = {"quantile", "lr"}


def config_from_file(path) -> dict:
    updates = {}
    names = {f.name for f in fields(RunConfig)}
    for row, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in names:
            raise ParameterError(f"unknown config key at line {row}: {line!r}")
        value = value.strip()
        if key in _INT_FIELDS:
            updates[key] = int(value)
        elif key in _FLOAT_FIELDS:
            updates[key] = float(value)
        else:
            updates[key] = value
    return updates


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------

def build_groups(panel: data.SeriesPanel, grouping: str) -> list:
    """Materialize (name, panel) tasks for the requested channel grouping.

    all_sites_oil: one multivariate panel of every site's oil channel.
    oil_water_per_site: one bivariate panel per site, truncated at that
    site's water breakthrough.
    oil_only_pairs: consecutive site pairs' oil channels (odd site out gets
    a univariate panel).
    """
    sites = panel.site_names
    if grouping == "all_sites_oil":
        return [("all", panel.select([(s, data.OIL) for s in sites]))]
    if grouping == "oil_water_per_site":
        groups = []
        for s in sites:
            sub = panel.select([(s, data.OIL), (s, data.WATER)])
            groups.append((s, data.truncate_at_breakthrough(sub)))
        return groups
    groups = []
    for i in range(0, len(sites), 2):
        pair = sites[i:i + 2]
        name = "+".join(pair)
        groups.append((name, panel.select([(s, data.OIL) for s in pair])))
    return groups


def load_panel(cfg: RunConfig) -> data.SeriesPanel:
    if not cfg.data:
        raise ParameterError("a data CSV is required (--data)")
    return data.load_csv(cfg.data)


def _ckpt_path(cfg: RunConfig, group: str) -> Path:
    if cfg.checkpoint:
        return Path(cfg.checkpoint.replace("{group}", group))
    return Path(cfg.out) / f"{cfg.model}_{group}.gck"


def _ensemble_path(cfg: RunConfig, group: str) -> Path:
    return Path(cfg.out) / f"{cfg.model}_{group}_ensemble.gck"


def _build_model(cfg: RunConfig, dim: int, stride: float):
    if cfg.model == "timegrad":
        return timegrad.TimeGradModel(
            dim, context_length=cfg.context_length,
            prediction_length=cfg.horizon, seed=cfg.seed)
    if cfg.model == "informer":
        return seqmodels.InformerModel(
            dim, l_x=cfg.enc_length, l_token=cfg.token_length,
            l_y=cfg.horizon, stride=stride, seed=cfg.seed)
    return seqmodels.VanillaTransformer(
        dim, l_x=cfg.enc_length, l_token=cfg.token_length,
        l_y=cfg.horizon, stride=stride, seed=cfg.seed)


def _load_model(cfg: RunConfig, rec: dict):
    if f"{cfg.model}/config" not in rec:
        raise ParameterError(
            f"checkpoint does not contain a {cfg.model} model")
    if cfg.model == "timegrad":
        return timegrad.TimeGradModel.from_records(rec)
    if cfg.model == "informer":
        return seqmodels.InformerModel.from_records(rec)
    return seqmodels.VanillaTransformer.from_records(rec)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> None:
    gen_cfg = data.SyntheticFieldConfig(seed=cfg.seed)
    if cfg.synthetic_config:
        gen_cfg = data.config_from_text(Path(cfg.synthetic_config).read_text())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    panel = data.generate_synthetic(gen_cfg)
    csv_path = out / "data.csv"
    data.save_csv(panel, csv_path)
    # provenance sidecar: full generator config echo, reusable as input
    (out / "data.sidecar").write_text(data.config_to_text(gen_cfg),
                                      encoding="utf-8")
    log(command="generate", csv=csv_path, steps=panel.n_steps,
        sites=len(panel.site_names), seed=gen_cfg.seed)


def cmd_train(cfg: RunConfig) -> None:
    cfg.validate()
    panel = load_panel(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for group, gpanel in build_groups(panel, cfg.grouping):
        ckpt = _ckpt_path(cfg, group)
        loss_csv = out / f"{cfg.model}_{group}_loss.csv"
        start_epoch = 0
        opt = None
        if ckpt.exists():
            rec = checkpoint.load(ckpt)
            model = _load_model(cfg, rec)
            start_epoch = int(rec["meta/epochs_done"][0])
            opt = AdamW(model.params(), lr=cfg.lr)
            opt.load_state_records(rec)
            log(command="train", group=group, resumed_from=ckpt,
                epochs_done=start_epoch)
        else:
            dim = gpanel.values.shape[1]
            model = _build_model(cfg, dim, float(gpanel.stride))
        epochs = cfg.effective_epochs

        def on_epoch(e, tr, vl, _group=group):
            log(command="train", model=cfg.model, group=_group, epoch=e,
                train_loss=f"{tr:.6f}", val_loss=f"{vl:.6f}",
                gap=f"{vl - tr:.6f}")

        if cfg.model == "timegrad":
            history, opt = timegrad.fit(
                model, gpanel, epochs=epochs, seed=cfg.seed, lr=cfg.lr,
                windows_per_epoch=cfg.windows_per_epoch, opt=opt,
                start_epoch=start_epoch, on_epoch=on_epoch)
        else:
            history, opt = seqmodels.train_model(
                model, gpanel, epochs=epochs, seed=cfg.seed, lr=cfg.lr,
                windows_per_epoch=cfg.windows_per_epoch, opt=opt,
                start_epoch=start_epoch, on_epoch=on_epoch)

        rec = model.state_records()
        rec.update(opt.state_records())
        rec["meta/epochs_done"] = np.array([float(start_epoch + epochs)])
        rec["meta/seed"] = np.array([float(cfg.seed)])
        checkpoint.save(ckpt, rec)

        header = "epoch,train_loss,val_loss\n"
        mode = "a" if (start_epoch > 0 and loss_csv.exists()) else "w"
        with open(loss_csv, mode, encoding="utf-8", newline="\n") as fh:
            if mode == "w":
                fh.write(header)
            for i, (tr, vl) in enumerate(zip(history.train_loss,
                                             history.val_loss)):
                fh.write(f"{start_epoch + i},{tr!r},{vl!r}\n")
        log(command="train", group=group, checkpoint=ckpt,
            final_loss=f"{history.train_loss[-1]:.6f}" if history.train_loss
            else "nan")


def _group_context(cfg: RunConfig, model, gpanel):
    """Context window ending at the split plus target timestamps."""
    k = gpanel.split_index
    need = model.context_length if cfg.model == "timegrad" else model.l_x
    if k < need:
        raise ParameterError(f"train span {k} shorter than context {need}")
    if gpanel.n_steps - k < cfg.horizon:
        raise ParameterError(
            f"horizon {cfg.horizon} exceeds the {gpanel.n_steps - k}-step "
            f"test span")
    context = gpanel.values[k - need:k]
    context_ts = gpanel.timestamps[k - need:k].astype(np.float64)
    target_ts = gpanel.timestamps[k:k + cfg.horizon].astype(np.float64)
    return context, context_ts, target_ts


def cmd_forecast(cfg: RunConfig) -> None:
    cfg.validate()
    panel = load_panel(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for group, gpanel in build_groups(panel, cfg.grouping):
        ckpt = _ckpt_path(cfg, group)
        if not ckpt.exists():
            raise ParameterError(f"checkpoint {ckpt} not found; train first")
        model = _load_model(cfg, checkpoint.load(ckpt))
        context, context_ts, target_ts = _group_context(cfg, model, gpanel)
        if cfg.model == "timegrad":
            ens = timegrad.forecast(model, context, cfg.horizon, cfg.samples,
                                    cfg.seed, timestamps=target_ts)
        else:
            if cfg.horizon != model.l_y:
                raise ParameterError(
                    f"one-shot decoder emits {model.l_y} steps; retrain with "
                    f"--horizon {cfg.horizon} or forecast at {model.l_y}")
            ens = seqmodels.forecast(model, context, context_ts, target_ts,
                                     cfg.samples, cfg.seed)
        checkpoint.save(_ensemble_path(cfg, group), {
            "ensemble/samples": ens.samples,
            "ensemble/timestamps": target_ts,
            "ensemble/denormalized": np.array([1.0]),
        })
        k = gpanel.split_index
        chosen = evaluation.quantile_path(ens, cfg.quantile)
        lo = evaluation.quantile_path(ens, 0.05)
        hi = evaluation.quantile_path(ens, 0.95)
        for j, (site, channel) in enumerate(gpanel.columns):
            truth = gpanel.values[k:k + cfg.horizon, j]
            stem = f"{cfg.model}_{group}_{site}_{channel}"
            evaluation.write_plot_csv(out / f"{stem}_plot.csv", target_ts,
                                      truth, chosen[:, j], lo[:, j], hi[:, j])
            svg = evaluation.svg_line_chart(
                target_ts,
                {"truth": truth, f"q{cfg.quantile:.2f}": chosen[:, j]},
                band=(lo[:, j], hi[:, j]),
                title=f"{cfg.model} {site} {channel} "
                      f"(quantile {cfg.quantile:.2f}, band 0.05-0.95)")
            (out / f"{stem}.svg").write_text(svg, encoding="utf-8")
        log(command="forecast", model=cfg.model, group=group,
            samples=cfg.samples, horizon=cfg.horizon,
            ensemble=_ensemble_path(cfg, group))


def cmd_evaluate(cfg: RunConfig) -> None:
    cfg.validate()
    panel = load_panel(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for group, gpanel in build_groups(panel, cfg.grouping):
        ens_path = _ensemble_path(cfg, group)
        if not ens_path.exists():
            raise ParameterError(f"ensemble {ens_path} not found; forecast first")
        rec = checkpoint.load(ens_path)
        ens = ForecastEnsemble(samples=rec["ensemble/samples"],
                               timestamps=rec["ensemble/timestamps"])
        k = gpanel.split_index
        horizon = ens.horizon
        if gpanel.n_steps - k < horizon:
            raise ParameterError("truth span shorter than the forecast horizon")
        if not np.array_equal(rec["ensemble/timestamps"],
                              gpanel.timestamps[k:k + horizon]):
            raise ParameterError("forecast/truth timestamp misalignment")
        moments = evaluation.ensemble_moments(ens)
        chosen = evaluation.quantile_path(ens, cfg.quantile)
        for j, (site, channel) in enumerate(gpanel.columns):
            truth = gpanel.values[k:k + horizon, j]
            train_series = gpanel.values[:k, j]
            label = site if channel == data.OIL else f"{site}({channel})"

            def mase_metric(pred, t, _train=train_series):
                return evaluation.mase(pred, t, _train)

            rows.append(SiteMetrics(
                site=label, quantile=cfg.quantile,
                mse=evaluation.mse(chosen[:, j], truth),
                mase=mase_metric(chosen[:, j], truth),
                ensemble_mean=float(moments.pooled_mean[j]),
                ensemble_std=float(moments.pooled_std[j]),
                truth_mean=float(truth.mean()),
                truth_std=float(truth.std()),
            ))
            best_q, best_mase = evaluation.best_quantile(
                ens, truth, mase_metric, dim=j)
            best_path = evaluation.quantile_path(ens, best_q)[:, j]
            rows.append(SiteMetrics(
                site=label + "*", quantile=best_q,
                mse=evaluation.mse(best_path, truth), mase=best_mase,
                ensemble_mean=float(moments.pooled_mean[j]),
                ensemble_std=float(moments.pooled_std[j]),
                truth_mean=float(truth.mean()),
                truth_std=float(truth.std()),
            ))
            log(command="evaluate", model=cfg.model, site=label,
                quantile=cfg.quantile, mase=f"{rows[-2].mase:.4f}",
                best_quantile=best_q, best_mase=f"{best_mase:.4f}",
                selection="oracle-on-test")
    report = MetricsReport(model=cfg.model, rows=rows)
    (out / f"{cfg.model}_report.csv").write_text(report.to_csv_text(),
                                                 encoding="utf-8")
    (out / f"{cfg.model}_report.txt").write_text(report.to_table_text(),
                                                 encoding="utf-8")
    log(command="evaluate", model=cfg.model,
        report=out / f"{cfg.model}_report.csv",
        note="starred rows use the oracle-selected best quantile")


def cmd_pipeline(cfg: RunConfig) -> None:
    cfg.validate()
    if cfg.data and cfg.synthetic_config:
        raise ParameterError(
            "exactly one data source: pass --data or --synthetic-config")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.data:
        cmd_generate(cfg)
        cfg.data = str(out / "data.csv")
    for model in MODEL_KINDS:
        sub = RunConfig(**{f.name: getattr(cfg, f.name)
                           for f in fields(RunConfig)})
        sub.model = model
        cmd_train(sub)
        cmd_forecast(sub)
        cmd_evaluate(sub)
    log(command="pipeline", status="complete", out=out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wellcast",
        description="probabilistic multi-well production forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "forecast", "evaluate", "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value file")
        p.add_argument("--model", choices=MODEL_KINDS, default=None)
        p.add_argument("--data", default=None, help="panel CSV path")
        p.add_argument("--synthetic-config", dest="synthetic_config",
                       default=None)
        p.add_argument("--grouping", choices=GROUPINGS, default=None)
        p.add_argument("--horizon", type=int, default=None)
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--quantile", type=float, default=None)
        p.add_argument("--windows-per-epoch", dest="windows_per_epoch",
                       type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--context-length", dest="context_length", type=int,
                       default=None)
        p.add_argument("--enc-length", dest="enc_length", type=int,
                       default=None)
        p.add_argument("--token-length", dest="token_length", type=int,
                       default=None)
    return parser


def config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        for key, value in config_from_file(args.config).items():
            setattr(cfg, key, value)
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            setattr(cfg, f.name, flag)
    cfg.command = args.command
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        dispatch = {"generate": cmd_generate, "train": cmd_train,
                    "forecast": cmd_forecast, "evaluate": cmd_evaluate,
                    "pipeline": cmd_pipeline}
        dispatch[args.command](cfg)
    except ValidationError as exc:
        log(error="validation", detail=str(exc))
        return 2
    except TrainingError as exc:
        log(error="numeric", detail=str(exc))
        return 3
    except OSError as exc:
        log(error="io", detail=str(exc))
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
