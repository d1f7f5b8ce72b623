"""
Reference regressors that set a floor for the network.

Both are ridge regressions (scikit-learn): one from simple colour statistics
of the window, one from the frozen global view. The second comes with a
control fitted on shuffled targets.
"""
import logging
from typing import Tuple

import numpy as np
from sklearn.linear_model import Ridge
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler

__all__ = ("mean_colour_features", "ridge_predict", "ridge_baseline", "linear_probe")

logger = logging.getLogger(__name__)


def mean_colour_features(windows: np.ndarray) -> np.ndarray:
    """
    Per-channel mean and standard deviation of (N, 3, H, W) windows:
    an (N, 6) matrix.
    """
    windows = np.asarray(windows, dtype=np.float64)
    return np.concatenate([windows.mean(axis=(2, 3)), windows.std(axis=(2, 3))], axis=1)


def ridge_predict(
    features_train: np.ndarray,
    y_train: np.ndarray,
    features_test: np.ndarray,
    alpha: float = 1.0,
) -> np.ndarray:
    pipe = Pipeline([("scale", StandardScaler()), ("ridge", Ridge(alpha=alpha))])
    pipe.fit(features_train, y_train)
    return np.asarray(pipe.predict(features_test), dtype=np.float64)


def ridge_baseline(
    windows_train: np.ndarray, y_train: np.ndarray, windows_test: np.ndarray, alpha: float = 1.0
) -> np.ndarray:
    "Predict expression from mean window colour."
    return ridge_predict(
        mean_colour_features(windows_train), y_train, mean_colour_features(windows_test), alpha
    )


def linear_probe(
    features_train: np.ndarray,
    y_train: np.ndarray,
    features_test: np.ndarray,
    seed: int = 0,
    alpha: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ridge probe on frozen global views. Returns ``(predictions,
    shuffled_predictions)``, the latter from a probe fitted after permuting
    the training rows of `y_train`.
    """
    predictions = ridge_predict(features_train, y_train, features_test, alpha)
    shuffled = np.random.default_rng(seed).permutation(len(y_train))
    control = ridge_predict(features_train, np.asarray(y_train)[shuffled], features_test, alpha)
    return predictions, control
