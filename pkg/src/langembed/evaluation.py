"""Evaluation: token error rate, linear probes, PCA, silhouette, ablation grid."""

from __future__ import annotations

import json
import logging
import warnings
from pathlib import Path

import numpy as np

from .model import ModelGraph, load_checkpoint
from .synthdata import ArraySet

log = logging.getLogger(__name__)

CONDITIONS = ("sat-on_proj-on", "sat-on_proj-off", "sat-off_proj-on", "sat-off_proj-off")

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
MARKERS = ("circle", "square", "triangle", "diamond", "cross", "star", "triangle-down", "plus")


class EvaluationError(ValueError):
    pass


def token_error_rate(predictions, labels) -> float:
    """Fraction of positions where ``predictions`` and ``labels`` disagree."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise EvaluationError(f"token_error_rate: length mismatch {p.shape} vs {y.shape}")
    if p.size == 0:
        raise EvaluationError("token_error_rate: empty sequences")
    return float((p != y).mean())


def _split_70_30(labels: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    for c in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == c))
        k = max(1, int(round(0.7 * len(rows))))
        k = min(k, len(rows) - 1)
        train.append(rows[:k])
        test.append(rows[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def linear_probe(embeddings, labels, steps: int = 500, lr: float = 0.1, seed: int = 0) -> float:
    """Held-out accuracy of a multinomial logistic probe on frozen embeddings.

    Features are standardized with train-split statistics; the probe is fit by
    full-batch gradient descent on a stratified 70/30 split.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise EvaluationError(f"linear_probe: embeddings {x.shape} vs labels {y.shape}")
    classes, y_idx, counts = np.unique(y, return_inverse=True, return_counts=True)
    if counts.min() < 2:
        raise EvaluationError(f"linear_probe: class {classes[counts.argmin()]} has fewer than 2 samples")
    if len(classes) == 1:
        warnings.warn("linear_probe: single-class labels, accuracy is trivially 1.0", stacklevel=2)
        return 1.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0]))
    tr, te = _split_70_30(y_idx, rng)
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd
    k = len(classes)
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    onehot = np.eye(k)[y_idx[tr]]
    xt = xs[tr]
    for _ in range(steps):
        z = xt @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(tr)
        w -= lr * (xt.T @ g)
        b -= lr * g.sum(axis=0)
    pred = (xs[te] @ w + b).argmax(axis=1)
    return float((pred == y_idx[te]).mean())


def within_group_probe(embeddings, labels, groups, **kw) -> float:
    """Mean probe accuracy for ``labels`` computed separately inside each group."""
    groups = np.asarray(groups)
    accs = [linear_probe(embeddings[groups == g], np.asarray(labels)[groups == g], **kw) for g in np.unique(groups)]
    return float(np.mean(accs))


def pca2(embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top two principal axes.

    Each axis is sign-fixed so its largest-magnitude loading is positive.
    Returns (N x 2 coordinates, explained-variance ratios of the two axes).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise EvaluationError(f"pca2: need an N x d array with d >= 2, got {x.shape}")
    if x.shape[0] < 3:
        raise EvaluationError(f"pca2: need at least 3 points, got {x.shape[0]}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    vals = np.clip(vals, 0.0, None)
    axes = vecs[:, order]
    for j in range(2):
        if axes[np.argmax(np.abs(axes[:, j])), j] < 0:
            axes[:, j] = -axes[:, j]
    total = vals.sum()
    ratios = vals[order] / total if total > 0 else np.zeros(2)
    return centered @ axes, ratios


def silhouette(embeddings, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance (O(N^2))."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise EvaluationError("silhouette: need at least 2 classes")
    if counts.min() < 2:
        raise EvaluationError("silhouette: every class needs at least 2 members")
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    dist = np.sqrt(np.clip(d2, 0.0, None))
    np.fill_diagonal(dist, 0.0)
    scores = np.empty(len(x))
    masks = [y == c for c in classes]
    for i in range(len(x)):
        own = None
        other = np.inf
        for c, m in zip(classes, masks):
            if c == y[i]:
                own = dist[i, m].sum() / (m.sum() - 1)
            else:
                other = min(other, dist[i, m].mean())
        denom = max(own, other)
        scores[i] = 0.0 if denom == 0 else (other - own) / denom
    return float(scores.mean())


# ---------------------------------------------------------------- reports


def per_language_ter(pred: np.ndarray, data: ArraySet) -> dict[str, float]:
    return {
        str(lang): token_error_rate(pred[data.y_lang == lang], data.phonemes[data.y_lang == lang])
        for lang in np.unique(data.y_lang)
    }


def embedding_report(model: ModelGraph, data: ArraySet, config, tags: dict) -> dict:
    """Probes, silhouettes and PCA of one condition on seen-language eval data."""
    z, h = model.embed(data.frames)
    emb = h if model.projection_enabled else z[:, : h.shape[1]]
    kw = {"steps": config.probe_steps, "lr": config.probe_lr, "seed": config.seed}
    coords, ratios = pca2(emb)
    n_spk_per_lang = config.speakers_per_language
    return {
        "condition": tags,
        "language_probe_accuracy": linear_probe(emb, data.y_lang, **kw),
        "speaker_probe_accuracy": within_group_probe(emb, data.y_spk, data.y_lang, **kw),
        "speaker_probe_chance": 1.0 / n_spk_per_lang,
        "speaker_probe_accuracy_global": linear_probe(emb, data.y_spk, **kw),
        "speaker_probe_chance_global": 1.0 / len(np.unique(data.y_spk)),
        "silhouette_by_language": {
            "z_lang": silhouette(z[:, : h.shape[1]], data.y_lang),
            "embedding": silhouette(emb, data.y_lang),
        },
        "silhouette_by_speaker": silhouette(emb, data.y_spk),
        "pca_projection": {
            "fit": "per-condition",
            "explained_variance_ratio": ratios.tolist(),
            "coords": coords.round(10).tolist(),
            "y_lang": data.y_lang.tolist(),
            "y_spk": data.y_spk.tolist(),
        },
    }


def evaluate_model(model: ModelGraph, splits, config, tags: dict, stage2_models: dict | None = None) -> dict:
    """Full report for one stage-1 model (and optional stage-2 fine-tunes of it)."""
    report = embedding_report(model, splits.seen_eval, config, tags)
    _, h = model.embed(splits.seen_eval.frames)
    pred = model.predict_phonemes(splits.seen_eval.frames, h)
    report["token_error_rate"] = per_language_ter(pred, splits.seen_eval)
    report["token_error_rate_mean"] = token_error_rate(pred, splits.seen_eval.phonemes)
    report["unseen_token_error_rate"] = {}
    for budget, m2 in sorted((stage2_models or {}).items()):
        report["unseen_token_error_rate"][str(budget)] = unseen_ter(m2, splits)
    _check_report(report)
    return report


def unseen_ter(model: ModelGraph, splits) -> float:
    data = splits.unseen_eval
    _, h = model.embed(data.frames)
    return token_error_rate(model.predict_phonemes(data.frames, h), data.phonemes)


def _check_report(report: dict) -> None:
    rates = [report["language_probe_accuracy"], report["speaker_probe_accuracy"], report["token_error_rate_mean"]]
    rates += list(report["token_error_rate"].values()) + list(report["unseen_token_error_rate"].values())
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise EvaluationError("rate outside [0, 1]")
    if sum(report["pca_projection"]["explained_variance_ratio"]) > 1 + 1e-9:
        raise EvaluationError("explained-variance ratios exceed 1")


def write_report(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- SVG


def _marker(shape: str, x: float, y: float, color: str, r: float = 3.5) -> str:
    if shape == "circle":
        return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}"/>'
    if shape == "square":
        return f'<rect x="{x - r:.2f}" y="{y - r:.2f}" width="{2 * r}" height="{2 * r}" fill="{color}"/>'
    if shape in ("cross", "plus"):
        if shape == "cross":
            a = f"M{x - r:.2f},{y - r:.2f}L{x + r:.2f},{y + r:.2f}M{x - r:.2f},{y + r:.2f}L{x + r:.2f},{y - r:.2f}"
        else:
            a = f"M{x - r:.2f},{y:.2f}L{x + r:.2f},{y:.2f}M{x:.2f},{y - r:.2f}L{x:.2f},{y + r:.2f}"
        return f'<path d="{a}" stroke="{color}" stroke-width="1.5"/>'
    pts = {
        "triangle": [(0, -r), (r, r), (-r, r)],
        "triangle-down": [(0, r), (r, -r), (-r, -r)],
        "diamond": [(0, -r), (r, 0), (0, r), (-r, 0)],
        "star": [(0, -r), (0.3 * r, -0.3 * r), (r, 0), (0.3 * r, 0.3 * r), (0, r),
                 (-0.3 * r, 0.3 * r), (-r, 0), (-0.3 * r, -0.3 * r)],
    }[shape]
    poly = " ".join(f"{x + dx:.2f},{y + dy:.2f}" for dx, dy in pts)
    return f'<polygon points="{poly}" fill="{color}"/>'


def scatter_svg(coords, colors, markers, title: str, legend: list[tuple[str, str]], width=800, height=600) -> str:
    coords = np.asarray(coords, dtype=np.float64)
    pad, right = 50, 140
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    sx = pad + (coords[:, 0] - lo[0]) / span[0] * (width - pad - right)
    sy = height - pad - (coords[:, 1] - lo[1]) / span[1] * (height - 2 * pad)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{width - pad - right}" height="{height - 2 * pad}" fill="none" stroke="#999"/>',
        f'<text x="{(width - right + pad) / 2:.0f}" y="{height - 15}" text-anchor="middle" font-family="sans-serif" font-size="12">PC1</text>',
        f'<text x="18" y="{height / 2:.0f}" font-family="sans-serif" font-size="12" transform="rotate(-90 18 {height / 2:.0f})">PC2</text>',
    ]
    for x, y, c, m in zip(sx, sy, colors, markers):
        out.append(_marker(m, x, y, c))
    for i, (label, color) in enumerate(legend):
        ly = pad + 10 + 18 * i
        out.append(_marker("circle", width - right + 20, ly, color))
        out.append(f'<text x="{width - right + 30}" y="{ly + 4}" font-family="sans-serif" font-size="12">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plots(report: dict, out_dir, name: str, speakers_per_language: int) -> list[Path]:
    """Two PCA scatter plots for one report: colored by language, and by speaker."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pca = report["pca_projection"]
    coords = np.asarray(pca["coords"])
    y_lang = np.asarray(pca["y_lang"])
    y_spk = np.asarray(pca["y_spk"])
    ratio = ", ".join(f"{r:.2f}" for r in pca["explained_variance_ratio"])
    colors = [PALETTE[int(l) % len(PALETTE)] for l in y_lang]
    legend = [(f"language {l}", PALETTE[int(l) % len(PALETTE)]) for l in np.unique(y_lang)]
    paths = []
    p = out_dir / f"{name}_by_language.svg"
    p.write_text(scatter_svg(coords, colors, ["circle"] * len(coords), f"{name}: PCA by language (EVR {ratio})", legend))
    paths.append(p)
    markers = [MARKERS[int(s) % speakers_per_language % len(MARKERS)] for s in y_spk]
    p = out_dir / f"{name}_by_speaker.svg"
    p.write_text(
        scatter_svg(coords, colors, markers, f"{name}: PCA by speaker (color language, shape speaker)", legend)
    )
    paths.append(p)
    return paths


def summary_markdown(reports: dict[str, dict]) -> str:
    """Tables laid out like the multilingual and low-resource result tables."""
    names = list(reports)
    langs = sorted({k for r in reports.values() for k in r["token_error_rate"]}, key=int)
    lines = ["# Seen-language token error rate (%)", ""]
    lines.append("| condition | " + " | ".join(f"lang {l}" for l in langs) + " | mean |")
    lines.append("|---" * (len(langs) + 2) + "|")
    for n in names:
        r = reports[n]
        cells = [f"{100 * r['token_error_rate'][l]:.2f}" for l in langs]
        lines.append(f"| {n} | " + " | ".join(cells) + f" | {100 * r['token_error_rate_mean']:.2f} |")
    lines += ["", "# Unseen-language token error rate (%) by fine-tuning budget", ""]
    budgets = sorted({b for r in reports.values() for b in r.get("unseen_token_error_rate", {})}, key=int)
    lines.append("| model | " + " | ".join(f"{b} utts" for b in budgets) + " |")
    lines.append("|---" * (len(budgets) + 1) + "|")
    for n in names:
        u = reports[n].get("unseen_token_error_rate", {})
        if u:
            lines.append(f"| {n} | " + " | ".join(f"{100 * u[b]:.2f}" if b in u else "-" for b in budgets) + " |")
    scratch = next((r["scratch_token_error_rate"] for r in reports.values() if r.get("scratch_token_error_rate")), None)
    if scratch:
        lines.append("| from scratch | " + " | ".join(f"{100 * scratch[b]:.2f}" if b in scratch else "-" for b in budgets) + " |")
    lines += ["", "# Embedding analysis", ""]
    lines.append("| condition | language probe | speaker probe (within language) | silhouette by language |")
    lines.append("|---|---|---|---|")
    for n in names:
        r = reports[n]
        lines.append(
            f"| {n} | {r['language_probe_accuracy']:.3f} | {r['speaker_probe_accuracy']:.3f} "
            f"(chance {r['speaker_probe_chance']:.3f}) | {r['silhouette_by_language']['embedding']:.3f} |"
        )
    return "\n".join(lines) + "\n"


def run_ablation_grid(checkpoints: dict[str, Path], splits, config, out_dir, stage2: dict | None = None,
                      scratch: dict | None = None) -> dict[str, dict]:
    """Evaluate the four SAT x projection conditions and emit reports and plots.

    ``checkpoints`` maps condition names (see ``CONDITIONS``) to stage-1
    checkpoint paths; ``stage2`` optionally maps condition -> {budget: path}.
    """
    missing = [c for c in CONDITIONS if c not in checkpoints or not Path(checkpoints[c]).exists()]
    if missing:
        raise FileNotFoundError(f"missing stage-1 checkpoints for conditions: {missing}")
    out_dir = Path(out_dir)
    reports = {}
    for cond in CONDITIONS:
        model, _ = load_checkpoint(checkpoints[cond])
        s2 = {b: load_checkpoint(p)[0] for b, p in (stage2 or {}).get(cond, {}).items()}
        tags = {"sat": model.sat_enabled, "projection": model.projection_enabled, "budgets": sorted(s2)}
        report = evaluate_model(model, splits, config, tags, s2)
        if scratch:
            report["scratch_token_error_rate"] = {str(b): v for b, v in sorted(scratch.items())}
        write_report(report, out_dir / cond / "eval_report.json")
        write_plots(report, out_dir / "plots", cond, config.speakers_per_language)
        reports[cond] = report
    (out_dir / "summary.md").write_text(summary_markdown(reports), encoding="utf-8")
    return reports
