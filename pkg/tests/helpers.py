"""Independent oracles and small fixtures shared by the test modules."""

from __future__ import annotations

import hashlib

import numpy as np

from samed import tensor as T
from samed.lora import LoraSpec, lora_layers
from samed.model import ModelConfig, SamedModel, customize
from samed.train import segmentation_loss

EPS = 1e-6


def micro_config(**kw) -> ModelConfig:
    """Smallest config that still exercises every block type."""
    base = dict(input_size=[16, 16], model_input_size=[32, 32], patch_size=8, embed_dim=16,
                depth=2, num_heads=2, decoder_depth=2, decoder_dim=16, num_classes=3,
                logit_size=[8, 8])
    base.update(kw)
    return ModelConfig(**base)


def perturb_lora(model, seed: int = 0, std: float = 0.1) -> None:
    """Give every B a nonzero value so gradients reach A."""
    rng = np.random.default_rng(seed)
    for layer in lora_layers(model).values():
        layer.lora_B.data = (rng.standard_normal(layer.lora_B.shape) * std).astype(layer.lora_B.dtype)


def scalar_loss(model, x, y) -> float:
    with T.no_tape():
        return segmentation_loss(model(x), y).item()


def autodiff_grads(model, x, y) -> dict[str, np.ndarray]:
    model.zero_grad()
    with T.GradTape() as tape:
        loss = segmentation_loss(model(x), y)
    tape.backward(loss)
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in model.trainable_parameters().items()}


def fd_entry(model, p, idx, x, y, eps: float = EPS) -> float:
    """Central difference of the loss w.r.t. one scalar of ``p``."""
    orig = p.data[idx]
    p.data[idx] = orig + eps
    up = scalar_loss(model, x, y)
    p.data[idx] = orig - eps
    down = scalar_loss(model, x, y)
    p.data[idx] = orig
    return (up - down) / (2 * eps)


def fd_direction(model, p, d, x, y, eps: float = EPS) -> float:
    orig = p.data.copy()
    p.data = orig + eps * d
    up = scalar_loss(model, x, y)
    p.data = orig - eps * d
    down = scalar_loss(model, x, y)
    p.data = orig
    return (up - down) / (2 * eps)


def rel_err(a, b, floor: float = 0.0) -> float:
    """Norm-based relative error; ``floor`` bounds the denominator from below."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + eps
        up = f()
        arr[i] = orig - eps
        down = f()
        arr[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def batch(samples, dtype=np.float64):
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.stack([s.label for s in samples])
    return x, y


def array_digest(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr)
    return hashlib.sha256(a.dtype.str.encode() + str(a.shape).encode() + a.tobytes()).hexdigest()


def samed_view(cfg: ModelConfig, base_seed=0, lora_seed=1, dtype=np.float64, spec=None):
    base = SamedModel(cfg, seed=base_seed, dtype=dtype)
    return base, customize(base, spec or LoraSpec(
        scope="encoder_and_decoder_transformer" if cfg.decoder_lora else "encoder_only"),
        seed=lora_seed)


# --- closed-form parameter counts ---------------------------------------------


def _lin(a, b):
    return a * b + b


def _mlp(dims):
    return sum(_lin(a, b) for a, b in zip(dims, dims[1:]))


def _attn(d):
    return 4 * _lin(d, d)


def hand_count(cfg: ModelConfig, rank: int, n_targets: int) -> dict:
    """Total and trainable values counted from the architecture description."""
    e, d, k = cfg.embed_dim, cfg.decoder_dim, cfg.num_classes
    n = (cfg.model_input_size[0] // cfg.patch_size) * (cfg.model_input_size[1] // cfg.patch_size)
    f = cfg.logit_size[0] // (cfg.model_input_size[0] // cfg.patch_size)
    du = d // 2
    encoder = (_lin(cfg.patch_size ** 2 * cfg.in_channels, e) + n * e
               + cfg.depth * (2 * 2 * e + _attn(e) + _mlp([e, 4 * e, e]))
               + 2 * e + _lin(e, d) + 2 * d)
    prompt = 2 * d
    block = 3 * _attn(d) + 4 * 2 * d + _mlp([d, 2 * d, d])
    transformer = n * d + cfg.decoder_depth * block + _attn(d) + 2 * d
    iou_mlp = _mlp([d, d, k])
    head = d + k * d + _lin(d, f * f * du) + 2 * du + k * _mlp([d, d, d, du]) + iou_mlp
    base_total = encoder + prompt + transformer + head

    per_proj = lambda c: rank * c + c * rank  # noqa: E731
    if cfg.finetune_mode == "decoder_only":
        return {"total": base_total, "trainable": prompt + transformer + head - iou_mlp}
    lora = cfg.depth * n_targets * per_proj(e)
    if cfg.decoder_lora:
        lora += (3 * cfg.decoder_depth + 1) * n_targets * per_proj(d)
        trainable = lora + prompt + head - iou_mlp
    else:
        trainable = lora + prompt + transformer + head - iou_mlp
    return {"total": base_total + lora, "trainable": trainable}


# --- loop oracles -----------------------------------------------------------


def loop_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    m = max(v)
    e = [np.exp(x - m) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def loop_ce_dice(logits: np.ndarray, labels: np.ndarray, eps: float = 1e-5):
    """Per-pixel loops over (B, h, w, k) logits and (B, h, w) labels."""
    b, h, w, k = logits.shape
    ce = 0.0
    inter = [0.0] * k
    psum = [0.0] * k
    gsum = [0.0] * k
    for n in range(b):
        for i in range(h):
            for j in range(w):
                p = loop_softmax(logits[n, i, j])
                c = int(labels[n, i, j])
                ce -= np.log(p[c])
                for cls in range(k):
                    g = 1.0 if cls == c else 0.0
                    inter[cls] += p[cls] * g
                    psum[cls] += p[cls]
                    gsum[cls] += g
    ce /= b * h * w
    ratios = [(2 * inter[c] + eps) / (psum[c] + gsum[c] + eps) for c in range(k)]
    dice = 1.0 - sum(ratios) / k
    return ce, dice


def reference_adamw(theta, grads, lr, b1, b2, wd, eps):
    """Scalar AdamW written from the update rule, one plain float at a time."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * wd * theta - lr * m_hat / (v_hat ** 0.5 + eps)
        out.append(theta)
    return out


def loop_boundary(mask: np.ndarray) -> list[tuple[int, int]]:
    """Mask pixels with a 4-neighbour outside the mask (the image edge counts as outside)."""
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                    out.append((i, j))
                    break
    return out


def brute_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """All-pairs Hausdorff between the boundary pixel sets of two masks."""
    pa, pb = loop_boundary(np.asarray(a, bool)), loop_boundary(np.asarray(b, bool))
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return float(np.hypot(*a.shape))
    best = 0.0
    for src, dst in ((pa, pb), (pb, pa)):
        for p in src:
            d = min(((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) ** 0.5 for q in dst)
            best = max(best, d)
    return best


# --- golden runs ----------------------------------------------------------------

GOLDEN_ITERS = 20
GOLDEN_DATA = {"n_train": 40, "n_test": 10}
GOLDEN_VARIANTS = {"samed": {}, "samed_s": {"model.decoder_lora": True}}


def golden_config(variant: str):
    import json as _json

    from samed.config import RunConfig, apply_overrides

    doc = apply_overrides(RunConfig().to_dict(),
                          {f"data.{k}": str(v) for k, v in GOLDEN_DATA.items()})
    doc = apply_overrides(doc, {k: _json.dumps(v) for k, v in GOLDEN_VARIANTS[variant].items()})
    return RunConfig.from_dict(doc)


def golden_dataset():
    from samed.data import generate

    return generate(golden_config("samed").data)


def train_golden_deltas(out_dir, dataset=None) -> dict:
    """Train every golden variant on the shared data; return variant -> delta path."""
    from pathlib import Path

    from samed.runner import run_training

    ds = dataset or golden_dataset()
    paths = {}
    for name in GOLDEN_VARIANTS:
        run_dir = Path(out_dir) / name
        run_training(golden_config(name), ds["train"], run_dir, GOLDEN_ITERS)
        paths[name] = run_dir / "delta.samed-delta"
    return paths


def reports_close(a: dict, b: dict, tol: float = 1e-9) -> bool:
    if a.keys() != b.keys():
        return False
    if isinstance(a.get("cases"), list):
        if len(a["cases"]) != len(b["cases"]):
            return False
        return all(reports_close(x, y, tol) for x, y in zip(a["cases"], b["cases"])) and \
            reports_close(a["mean"], b["mean"], tol)
    for k, v in a.items():
        w = b[k]
        if isinstance(v, dict):
            if not reports_close(v, w, tol):
                return False
        elif isinstance(v, float):
            if abs(v - w) > tol:
                return False
        elif v != w:
            return False
    return True
