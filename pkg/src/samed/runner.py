"""Train/evaluate runs and ablation sweeps over one axis of the recipe."""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ckpt, data, metrics
from .config import ConfigError, RunConfig, apply_overrides, flatten
from .model import ModelConfig, SamedModel, count_parameters
from .train import train

log = logging.getLogger(__name__)

# axis -> (first column title, [(row label, dotted overrides)])
AXES = {
    "finetune_scope": ("Methods", [
        ("Mask decoder", {"model.finetune_mode": "decoder_only"}),
        ("Image encoder + mask decoder", {"model.finetune_mode": "encoder_and_decoder"}),
    ]),
    "decoder_lora": ("Methods", [
        ("SAMed", {"model.decoder_lora": False}),
        ("SAMed_s", {"model.decoder_lora": True}),
    ]),
    "rank": ("Rank size", [(str(r), {"lora.rank": r}) for r in (1, 4, 16)]),
    "projections": ("Proj layer", [
        ("Q", {"lora.targets": ["q"]}),
        ("Q+V", {"lora.targets": ["q", "v"]}),
        ("Q+K+V+O", {"lora.targets": ["q", "k", "v", "o"]}),
    ]),
    "strategies": ("Training strategies", [
        ("No strategies", {"train.schedule": "constant", "train.optimizer": "sgd"}),
        ("+warmup", {"train.schedule": "warmup_decay", "train.optimizer": "sgd"}),
        ("+warmup+AdamW", {"train.schedule": "warmup_decay", "train.optimizer": "adamw"}),
    ]),
}

# keys that follow from others and may change along with an axis
_DERIVED = {"lora.scope"}


class RunFailed(RuntimeError):
    def __init__(self, run_id: str, cause: BaseException):
        super().__init__(f"run {run_id} failed: {type(cause).__name__}: {cause}")
        self.run_id = run_id
        self.cause = cause


def run_id(cfg: RunConfig, iterations: int | None) -> str:
    doc = {"config": cfg.to_dict(), "iterations": iterations}
    return f"{ckpt.fnv1a64(ckpt.canonical_json(doc)):016x}"


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def run_training(cfg: RunConfig, train_samples, out_dir, iterations: int | None = None):
    """Customise a fresh base, train it, and write delta, loss log and config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base, model = cfg.build()
    state = train(model, train_samples, cfg.train, iterations=iterations)
    cfg.dump(out / "config.json")
    (out / "model_config.json").write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "loss_log.csv").write_text(state.log_csv())
    ckpt.save_delta(model, out / "delta.samed-delta",
                    {"iteration": state.iteration, "seed": cfg.train.seed})
    return base, model, state


def evaluate_delta(delta_path, samples, class_names=None):
    header, _ = ckpt.read_delta(delta_path)
    base = SamedModel(ModelConfig.from_dict(header["model_config"]), seed=header["base_seed"],
                      dtype=np.dtype(header["dtype"]))
    model = ckpt.load_delta(base, delta_path)
    return metrics.evaluate(model, samples, class_names)


def report_dict(reports, mean) -> dict:
    def one(r):
        return {"case_id": r.case_id, "mean_dsc": r.mean_dsc, "mean_hd": r.mean_hd,
                "per_class_dsc": {str(c): v for c, v in r.per_class_dsc.items()},
                "per_class_hd": {str(c): v for c, v in r.per_class_hd.items()}}
    return {"cases": [one(r) for r in reports], "mean": one(mean)}


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationPlan:
    axis: str
    base: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    iterations: int | None = None
    data: str | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; choose from {sorted(AXES)}")

    @classmethod
    def load(cls, path) -> AblationPlan:
        doc = json.loads(Path(path).read_text())
        known = {"axis", "base", "seeds", "iterations", "data"}
        if set(doc) - known:
            raise ConfigError(f"unknown plan keys {sorted(set(doc) - known)}; valid: {sorted(known)}")
        return cls(**doc)

    def runs(self) -> list[tuple[str, int, RunConfig]]:
        """(row label, seed, config) for every run; each differs from base only on the axis."""
        base_doc = RunConfig.from_dict(self.base).to_dict()
        base_flat = flatten(base_doc)
        seeds = self.seeds or [base_doc["train"]["seed"]]
        out = []
        for label, overrides in AXES[self.axis][1]:
            doc = apply_overrides(base_doc, {k: json.dumps(v) for k, v in overrides.items()})
            for seed in seeds:
                doc_s = apply_overrides(doc, {"train.seed": str(seed)})
                cfg = RunConfig.from_dict(doc_s)
                changed = {k for k, v in flatten(cfg.to_dict()).items() if base_flat[k] != v}
                changed -= set(overrides) | _DERIVED | {"train.seed"}
                if changed:
                    raise ConfigError(f"run {label!r} also changes {sorted(changed)}")
                out.append((label, seed, cfg))
        return out


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()


def _execute(job) -> dict:
    label, seed, cfg_doc, iterations, data_dir, run_dir = job
    cfg = RunConfig.from_dict(cfg_doc)
    rid = Path(run_dir).name
    done = Path(run_dir) / "report.json"
    if done.exists():
        return json.loads(done.read_text())
    try:
        ds = data.load(data_dir)
        _, model, _ = run_training(cfg, ds["train"], run_dir, iterations)
        reports, mean = metrics.evaluate(model, ds["test"], ds.class_names)
        counts = count_parameters(model)
        result = {"run_id": rid, "label": label, "seed": seed,
                  "mean_dsc": mean.mean_dsc, "mean_hd": mean.mean_hd,
                  "per_class_dsc": {str(c): v for c, v in mean.per_class_dsc.items()},
                  "trainable": counts["trainable"], "total": counts["total"],
                  "delta_bytes": (Path(run_dir) / "delta.samed-delta").stat().st_size,
                  "class_names": ds.class_names}
    except Exception as e:  # noqa: BLE001
        raise RunFailed(rid, e) from e
    _write_json(done, result)
    return result


def _model_size(n: int) -> str:
    return f"{n / 1e6:.4f}M"


def ablation_table(axis: str, results: list[dict]) -> tuple[list[str], list[list]]:
    title, rows_spec = AXES[axis]
    class_names = results[0]["class_names"]
    header = [title, "DSC"] + (["Model size"] if axis == "decoder_lora" else []) + class_names[1:]
    rows = []
    for label, _ in rows_spec:
        rs = [r for r in results if r["label"] == label]
        row = [label, float(np.mean([r["mean_dsc"] for r in rs]))]
        if axis == "decoder_lora":
            row.append(_model_size(rs[0]["trainable"]))
        k = len(class_names)
        row += [float(np.mean([r["per_class_dsc"][str(c)] for r in rs])) for c in range(1, k)]
        rows.append(row)
    return header, rows


def run_plan(plan: AblationPlan, out_dir, jobs: int = 1) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = plan.runs()
    if plan.data:
        data_dir = Path(plan.data)
    else:
        data_dir = out / "data"
        if not (data_dir / "manifest.json").exists():
            data.save(data.generate(runs[0][2].data), data_dir)
    jobs_list = []
    for label, seed, cfg in runs:
        rid = run_id(cfg, plan.iterations)
        jobs_list.append((label, seed, cfg.to_dict(), plan.iterations, str(data_dir),
                          str(out / "runs" / rid)))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_execute, jobs_list))
    else:
        results = [_execute(j) for j in jobs_list]
    header, rows = ablation_table(plan.axis, results)
    text = metrics.format_table(header, rows)
    (out / f"table_{plan.axis}.txt").write_text(text)
    with open(out / f"table_{plan.axis}.csv", "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    return {"axis": plan.axis, "header": header, "rows": rows, "table": text,
            "runs": [{"label": r["label"], "seed": r["seed"], "run_id": r["run_id"],
                      "dir": str(out / "runs" / r["run_id"])} for r in results]}
