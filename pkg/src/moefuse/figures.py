"""Matplotlib renderings of the delimited reports.

Report-writing commands drop a PNG next to each CSV unless figures are
switched off. The CSVs stay authoritative; rendering is deterministic
(fixed geometry, pinned PNG metadata, no timestamps) so reruns under the
same seed produce byte-identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVEKW = {"dpi": 110, "metadata": {"Software": "moefuse"}}
_TP_COLOR = "#2a7fba"
_FP_COLOR = "#c25539"


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVEKW)
    plt.close(fig)


def _num(value):
    if value in (None, ""):
        return None
    return float(value)


def save_population_figure(rows: list[dict], path) -> None:
    """Grouped TP/FP bars per profile for both uncertainty channels.

    rows carry profile, modality, population, deviation_ratio and
    reg_uncertainty (empty cells allowed for empty populations).
    """
    profiles = sorted({r["profile"] for r in rows})
    cell = {(r["profile"], r["modality"], r["population"]): r for r in rows}
    metrics = (("deviation_ratio", "class deviation ratio"),
               ("reg_uncertainty", "regression uncertainty"))
    fig, axes = plt.subplots(2, 2, figsize=(9.2, 6.4), sharex=True)
    for row_i, modality in enumerate(("lidar", "camera")):
        for col_i, (key, label) in enumerate(metrics):
            ax = axes[row_i][col_i]
            xs = range(len(profiles))
            for off, pop, color in ((-0.2, "tp", _TP_COLOR), (0.2, "fp", _FP_COLOR)):
                vals = [_num(cell.get((p, modality, pop), {}).get(key))
                        for p in profiles]
                ax.bar([x + off for x in xs],
                       [0.0 if v is None else v for v in vals],
                       width=0.38, color=color, label=pop.upper())
            ax.set_xticks(list(xs))
            ax.set_xticklabels(profiles, rotation=30, ha="right")
            ax.set_title(f"{modality}: {label}", fontsize=10)
            ax.grid(axis="y", alpha=0.3)
    axes[0][0].legend(fontsize=8)
    _finish(fig, path)


def save_training_figure(log_rows: list[dict], path) -> None:
    """Loss (left axis) and validation moderate AP (right) per epoch."""
    epochs = [int(r["epoch"]) for r in log_rows]
    loss = [_num(r["loss"]) for r in log_rows]
    val = [(int(r["epoch"]), _num(r["val_ap_moderate"])) for r in log_rows
           if _num(r["val_ap_moderate"]) is not None]
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    ax.plot(epochs, loss, color=_FP_COLOR, marker="o", markersize=3, label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    if val:
        ax2 = ax.twinx()
        ax2.plot([e for e, _ in val], [v for _, v in val], color=_TP_COLOR,
                 marker="s", markersize=3, label="val AP (moderate)")
        ax2.set_ylabel("validation AP (moderate)")
        fig.legend(loc="lower center", ncol=2, fontsize=8)
    _finish(fig, path)


def save_eval_figure(rows: list[dict], path) -> None:
    """Moderate AP bars grouped by method across profiles."""
    profiles = sorted({r["profile"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    fig, ax = plt.subplots(figsize=(7.6, 4.4))
    width = 0.8 / max(len(methods), 1)
    for m_i, method in enumerate(methods):
        xs, ys = [], []
        for p_i, profile in enumerate(profiles):
            match = [r for r in rows
                     if r["profile"] == profile and r["method"] == method]
            val = _num(match[0]["moderate"]) if match else None
            if val is not None:
                xs.append(p_i + (m_i - (len(methods) - 1) / 2) * width)
                ys.append(val)
        ax.bar(xs, ys, width=width * 0.92, label=method)
    ax.set_xticks(range(len(profiles)))
    ax.set_xticklabels(profiles, rotation=30, ha="right")
    ax.set_ylabel("AP (moderate)")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    _finish(fig, path)


def save_compare_figure(run_rows: list[dict], summary_rows: list[dict],
                        path) -> None:
    """Per-seed moderate AP of both methods, one panel per profile."""
    profiles = sorted({r["profile"] for r in run_rows})
    p_values = {r["profile"]: _num(r.get("p_value")) for r in summary_rows}
    fig, axes = plt.subplots(1, max(len(profiles), 1),
                             figsize=(4.4 * max(len(profiles), 1), 4.0),
                             squeeze=False)
    for i, profile in enumerate(profiles):
        ax = axes[0][i]
        rows = [r for r in run_rows if r["profile"] == profile]
        methods = sorted({r["method"] for r in rows})
        for method, color in zip(methods, (_TP_COLOR, _FP_COLOR)):
            pts = sorted((int(r["seed"]), _num(r["moderate"])) for r in rows
                         if r["method"] == method)
            ax.plot([s for s, _ in pts], [v for _, v in pts], marker="o",
                    markersize=4, color=color, label=method)
        title = profile
        if p_values.get(profile) is not None:
            title += f"  (p = {p_values[profile]:.4g})"
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("seed")
        ax.set_ylabel("AP (moderate)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    _finish(fig, path)


def save_ablation_figure(rows: list[dict], path) -> None:
    """Mean moderate AP per variant with per-seed points overlaid."""
    methods = sorted({r["method"] for r in rows})
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for i, method in enumerate(methods):
        vals = [_num(r["moderate"]) for r in rows if r["method"] == method]
        vals = [v for v in vals if v is not None]
        if not vals:
            continue
        ax.bar([i], [sum(vals) / len(vals)], width=0.6, color=_TP_COLOR,
               alpha=0.75)
        ax.plot([i] * len(vals), vals, linestyle="none", marker="o",
                markersize=4, color="#222222")
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylabel("AP (moderate)")
    ax.grid(axis="y", alpha=0.3)
    _finish(fig, path)
