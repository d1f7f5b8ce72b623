"""
Synthetic slide windows with planted image-to-expression structure.

Every window is a smooth stained-tissue texture with a per-patient colour
shift. Small coloured blobs ("motifs") are scattered over it at uniform
random positions. The expression of a gene depends on how many blobs of the
motifs that drive it were planted, not on where they were planted, so the
signal has to be gathered from the whole window. A fraction of the genes
respond exponentially, which gives them long-tailed distributions.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from scipy import stats

from .data import DatasetBundle
from .errors import ConfigError

__all__ = (
    "MotifSpec",
    "make_motifs",
    "expression_from_counts",
    "generate",
    "gene_skewness",
    "motif_details",
)

logger = logging.getLogger(__name__)

BACKGROUND = np.array([0.86, 0.66, 0.76])
NOISE_FLOOR = 0.05


@dataclass
class MotifSpec:
    """
    :param colour: RGB colour of the blob.
    :param radius: Blob radius in pixels.
    :param genes: Indices of the genes this motif drives.
    :param weights: Nonnegative response weight per driven gene.
    :param tail_exponent: Exponent of the response of skewed genes.
    """

    colour: List[float]
    radius: float
    genes: List[int]
    weights: List[float]
    tail_exponent: float = 1.0

    def __post_init__(self) -> None:
        if not self.genes:
            raise ConfigError(["A motif has to drive at least one gene."])
        if len(self.genes) != len(self.weights):
            raise ConfigError(["Motif genes and weights differ in length."])
        if min(self.weights) < 0:
            raise ConfigError(["Motif weights must be nonnegative."])


def make_motifs(
    rng: np.random.Generator, n_motifs: int, num_genes: int, image_size: int
) -> List[MotifSpec]:
    """
    Gene ``g`` is driven by motif ``g % n_motifs``, and by the next motif with
    a smaller weight.
    """
    palette = rng.uniform(0.05, 0.55, (n_motifs, 3))
    radius = max(1.0, image_size / 16.0)
    motifs = []
    for k in range(n_motifs):
        genes: List[int] = []
        weights: List[float] = []
        for g in range(num_genes):
            if g % n_motifs == k:
                genes.append(g)
                weights.append(float(rng.uniform(0.75, 1.5)))
            elif n_motifs > 1 and (g + 1) % n_motifs == k:
                genes.append(g)
                weights.append(float(rng.uniform(0.0, 0.5)))
        if not genes:
            genes, weights = [k % num_genes], [float(rng.uniform(0.75, 1.5))]
        motifs.append(
            MotifSpec(
                colour=[float(c) for c in palette[k]],
                radius=radius,
                genes=genes,
                weights=weights,
            )
        )
    return motifs


def _weight_matrix(motifs: Sequence[MotifSpec], num_genes: int) -> np.ndarray:
    weights = np.zeros((len(motifs), num_genes))
    for k, motif in enumerate(motifs):
        weights[k, motif.genes] = motif.weights
    return weights


def expression_from_counts(
    counts: np.ndarray,
    motifs: Sequence[MotifSpec],
    skewed: np.ndarray,
    noise: np.ndarray,
) -> np.ndarray:
    """
    Raw expression from motif counts.

    A regular gene is ``sum_k count_k * w_kg``. A skewed gene is driven only
    by its primary motif and responds with ``exp(tau * count * w) - 1``. The
    noise floor is added to both.

    :param counts: (N, K) planted motifs per window.
    :param skewed: (M,) boolean mask of skewed genes.
    :param noise: (N, M) nonnegative noise floor.
    """
    counts = np.asarray(counts, dtype=np.float64)
    num_genes = len(skewed)
    weights = _weight_matrix(motifs, num_genes)
    linear = counts @ weights

    tails = np.zeros_like(linear)
    for k, motif in enumerate(motifs):
        for g, w in zip(motif.genes, motif.weights):
            if skewed[g] and g % len(motifs) == k:
                tails[:, g] += np.expm1(motif.tail_exponent * counts[:, k] * w)

    return np.where(skewed, tails, linear) + noise


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    cells = max(1, size // 4)
    coarse = rng.normal(0.0, 0.04, (3, cells, cells))
    factor = -(-size // cells)
    smooth = np.kron(coarse, np.ones((factor, factor)))
    return smooth[:, :size, :size] + rng.normal(0.0, 0.015, (3, size, size))


def _paint(
    image: np.ndarray, motif: MotifSpec, y: float, x: float, yy: np.ndarray, xx: np.ndarray
) -> None:
    mask = ((yy - y) ** 2 + (xx - x) ** 2) <= motif.radius**2
    for c in range(3):
        image[c][mask] = motif.colour[c]


def generate(
    seed: int,
    n_patients: int,
    windows_per_patient: int,
    num_genes: int,
    image_size: int,
    skew_fraction: float,
    slides_per_patient: int = 2,
    motifs_per_window: float = 4.0,
    n_motifs: int = 4,
) -> DatasetBundle:
    """
    Generate a bundle. The same arguments always give the same bundle.
    """
    problems = []
    for name, value in (
        ("n_patients", n_patients),
        ("windows_per_patient", windows_per_patient),
        ("num_genes", num_genes),
        ("image_size", image_size),
        ("slides_per_patient", slides_per_patient),
        ("n_motifs", n_motifs),
    ):
        if value <= 0:
            problems.append(f"{name} must be positive, got {value!r}.")
    if not 0.0 <= skew_fraction <= 1.0:
        problems.append(f"skew_fraction must lie in [0, 1], got {skew_fraction!r}.")
    if motifs_per_window < 0:
        problems.append(f"motifs_per_window must be >= 0, got {motifs_per_window!r}.")
    if problems:
        raise ConfigError(problems)

    rng = np.random.default_rng(seed)
    motifs = make_motifs(rng, n_motifs, num_genes, image_size)
    n_skewed = int(round(skew_fraction * num_genes))
    skewed = np.zeros(num_genes, dtype=bool)
    skewed[rng.permutation(num_genes)[:n_skewed]] = True

    n = n_patients * windows_per_patient
    windows = np.empty((n, 3, image_size, image_size))
    counts = np.zeros((n, n_motifs), dtype=np.int64)
    patient_ids = np.repeat(np.arange(n_patients), windows_per_patient)
    slide_ids = np.empty(n, dtype=np.int64)
    yy, xx = np.mgrid[0:image_size, 0:image_size]

    for patient in range(n_patients):
        shift = rng.normal(0.0, 0.05, 3)
        for w in range(windows_per_patient):
            i = patient * windows_per_patient + w
            slide = w * slides_per_patient // windows_per_patient
            slide_ids[i] = patient * slides_per_patient + slide
            image = _texture(rng, image_size) + BACKGROUND[:, None, None]
            counts[i] = rng.poisson(motifs_per_window / n_motifs, n_motifs)
            for k in range(n_motifs):
                for _ in range(counts[i, k]):
                    y, x = rng.uniform(0, image_size, 2)
                    _paint(image, motifs[k], y, x, yy, xx)
            windows[i] = np.clip(image + shift[:, None, None], 0.0, 1.0)

    noise = NOISE_FLOOR * rng.lognormal(0.0, 0.25, (n, num_genes))
    expression = expression_from_counts(counts, motifs, skewed, noise)

    metadata: Dict[str, Any] = {
        "source": "synthetic",
        "seed": seed,
        "skew_fraction": skew_fraction,
        "motifs_per_window": motifs_per_window,
        "motifs": [asdict(m) for m in motifs],
        "skewed_genes": [int(g) for g in np.flatnonzero(skewed)],
        "motif_counts": counts.tolist(),
        "noise": noise.tolist(),
    }
    logger.info(
        "Generated %d windows (%d patients, %d genes, %d skewed)",
        n, n_patients, num_genes, n_skewed,
    )
    return DatasetBundle(
        windows=windows,
        raw_expression=expression,
        window_ids=np.arange(n),
        patient_ids=patient_ids,
        slide_ids=slide_ids,
        genes=[f"gene{g:03d}" for g in range(num_genes)],
        metadata=metadata,
    )


def gene_skewness(expression: np.ndarray) -> np.ndarray:
    "Sample skewness of every gene column."
    return np.asarray(stats.skew(expression, axis=0, bias=True))


def motif_details(
    bundle: DatasetBundle,
) -> Tuple[List[MotifSpec], np.ndarray, np.ndarray, np.ndarray]:
    """
    (motifs, counts, skewed mask, noise) as recorded by `generate`.
    """
    meta = bundle.metadata
    if meta.get("source") != "synthetic":
        raise ConfigError(["Bundle was not generated synthetically."])
    motifs = [MotifSpec(**m) for m in meta["motifs"]]
    skewed = np.zeros(bundle.num_genes, dtype=bool)
    skewed[meta["skewed_genes"]] = True
    return motifs, np.array(meta["motif_counts"]), skewed, np.array(meta["noise"])
