"""
Threshold curves (precision, recall and F1 against theta) of one or more sweeps.
Needs matplotlib (`pip install termclust[plot]`).
"""
import math


def _figure_size(width):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    return width, width * golden_ratio * 1.6


def plot_threshold_curves(sweeps, path, width=8):
    """
    Draw one panel per score with one line per run and save the figure.
    Parameters
    ----------
    sweeps: dict
        Run name -> list of EvalReport (or dicts with theta/precision/recall/f1).
    path: str
        An output image path; the format follows the extension.
    width: float
        Figure width in inches.
    """
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(nrows=1, ncols=3, sharex=True, figsize=_figure_size(width))
    for name, reports in sweeps.items():
        rows = [r if isinstance(r, dict) else r.to_dict() for r in reports]
        thetas = [r['theta'] for r in rows]
        for ax, score in zip(axes, ('precision', 'recall', 'f1')):
            ax.plot(thetas, [r[score] for r in rows], marker='.', label=name)
    for ax, title in zip(axes, ('Precision', 'Recall', 'F1')):
        ax.set_title(title, fontsize=width * 1.5)
        ax.set_xlabel('theta')
        ax.set_ylim(0.0, 1.0)
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=width)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
