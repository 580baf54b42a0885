import logging
import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from reportgen.core.tokenizer import END_OF_WORD  # noqa: E402

logger = logging.getLogger(__name__)


def render_attention_panels(path, tokens, maps, columns=6, cmap="viridis", dpi=120):
    """
    Saves one heat-map panel per generated token, titled with the token.

    Args:
        path (str): Output image path; the format follows the extension.
        tokens (Sequence[str]): Generated tokens, aligned with `maps`.
        maps (Sequence[np.ndarray]): `[h, w]` attention maps.
        columns (int): Panels per row.
    """
    count = max(len(maps), 1)
    columns = min(columns, count)
    rows = math.ceil(count / columns)

    fig, axes = plt.subplots(rows, columns, figsize=(2.0 * columns, 2.2 * rows), squeeze=False)
    peak = max((float(np.max(m)) for m in maps), default=1.0)
    for index, ax in enumerate(axes.flat):
        ax.set_xticks([])
        ax.set_yticks([])
        if index >= len(maps):
            ax.axis("off")
            continue
        ax.imshow(np.asarray(maps[index]), cmap=cmap, vmin=0.0, vmax=peak, interpolation="nearest")
        ax.set_title(tokens[index].replace(END_OF_WORD, ""), fontsize=9)

    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    logger.debug(f"Rendered {len(maps)} attention panels to {path}")
