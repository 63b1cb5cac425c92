from dataclasses import dataclass
from typing import Tuple

import cv2
import numpy as np

from utils.errors import ValidationError
from utils.normalize import Normalize

# =========================
# PARAMÈTRES SSIM
# =========================

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DISSIMILARITY_EPS = 1e-6


@dataclass(frozen=True)
class SSIMWindow:
    size: int = SSIM_WINDOW
    sigma: float = SSIM_SIGMA
    c1: float = SSIM_C1
    c2: float = SSIM_C2

    def as_dict(self) -> dict:
        return {"size": self.size, "sigma": self.sigma, "c1": self.c1, "c2": self.c2}


@dataclass(eq=False)
class Frame:
    values: np.ndarray
    view_index: int = 0
    timestamp: int = 0

    def __post_init__(self):
        self.values = Normalize.clamp_unit(self.values)

    def luma(self) -> np.ndarray:
        return Normalize.to_luma(self.values)


@dataclass(eq=False)
class DissimilarityMap:
    values: np.ndarray
    view_index: int = 0
    frame_pair: Tuple[int, int] = (0, 0)


# =========================
# SSIM LOCAL
# =========================

def _as_luma(frame) -> np.ndarray:
    if isinstance(frame, Frame):
        return frame.luma()
    return Normalize.to_luma(Normalize.clamp_unit(frame))


def _gaussian_filter(img: np.ndarray, window: SSIMWindow) -> np.ndarray:
    return cv2.GaussianBlur(
        img,
        (window.size, window.size),
        sigmaX=window.sigma,
        sigmaY=window.sigma,
        borderType=cv2.BORDER_REFLECT_101,
    )


def local_ssim_map(a, b, window: SSIMWindow = SSIMWindow()) -> np.ndarray:
    """
    SSIM par pixel sur une fenêtre gaussienne :
    ((2μaμb+C1)(2σab+C2)) / ((μa²+μb²+C1)(σa²+σb²+C2))
    """
    x = _as_luma(a)
    y = _as_luma(b)
    if x.shape != y.shape:
        raise ValidationError("ssim_shapes", f"{x.shape} != {y.shape}")

    mu_x = _gaussian_filter(x, window)
    mu_y = _gaussian_filter(y, window)
    var_x = _gaussian_filter(x * x, window) - mu_x * mu_x
    var_y = _gaussian_filter(y * y, window) - mu_y * mu_y
    cov = _gaussian_filter(x * y, window) - mu_x * mu_y

    num = (2 * mu_x * mu_y + window.c1) * (2 * cov + window.c2)
    den = (mu_x ** 2 + mu_y ** 2 + window.c1) * (var_x + var_y + window.c2)
    return np.clip(num / den, -1.0, 1.0)


def dissimilarity_target(a, b, window: SSIMWindow = SSIMWindow(), normalize: bool = True) -> DissimilarityMap:
    """
    Carte de dissimilarité : (1 − SSIM)/2 dans [0,1], puis normalisation
    min-max par paire si le maximum dépasse ε.
    """
    ssim = local_ssim_map(a, b, window)
    values = np.clip((1.0 - ssim) / 2.0, 0.0, 1.0)
    if normalize:
        values = Normalize.minmax(values, eps=DISSIMILARITY_EPS)

    view_index = a.view_index if isinstance(a, Frame) else 0
    pair = (a.timestamp, b.timestamp) if isinstance(a, Frame) and isinstance(b, Frame) else (0, 0)
    return DissimilarityMap(values=values, view_index=view_index, frame_pair=pair)
