import numpy as np


class Normalize:
    # Poids de luminance pour un ordre de canaux R, G, B
    LUMA_RGB = (0.299, 0.587, 0.114)

    @staticmethod
    def clamp_unit(values: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)

    @staticmethod
    def to_unit_range(img: np.ndarray) -> np.ndarray:
        """
        Convertit une image entière (uint8 / uint16) ou flottante vers [0, 1].
        """
        img = np.asarray(img)
        if img.dtype == np.uint8:
            return img.astype(np.float64) / 255.0
        if img.dtype == np.uint16:
            return img.astype(np.float64) / 65535.0
        return Normalize.clamp_unit(img)

    @staticmethod
    def to_luma(values: np.ndarray, channel_order: str = "RGB") -> np.ndarray:
        """
        Image H×W×C dans [0,1] -> luminance H×W.

        Exemples :
        - H×W            -> inchangée
        - H×W×1          -> canal unique
        - H×W×3 (BGR)    -> 0.114 B + 0.587 G + 0.299 R
        """
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            return values
        if values.ndim != 3:
            raise ValueError(f"Image attendue en H×W ou H×W×C, reçu {values.shape}")
        if values.shape[2] == 1:
            return values[:, :, 0]

        r, g, b = Normalize.LUMA_RGB
        if channel_order.upper() == "BGR":
            weights = np.array([b, g, r])
        else:
            weights = np.array([r, g, b])
        return values[:, :, :3] @ weights

    @staticmethod
    def minmax(values: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        """
        Normalisation min-max si le maximum dépasse eps, sinon inchangé.
        Une carte constante non nulle est ramenée à 1.
        """
        values = np.asarray(values, dtype=np.float64)
        vmax = float(values.max()) if values.size else 0.0
        if vmax <= eps:
            return values
        vmin = float(values.min())
        if vmax - vmin <= eps:
            return values / vmax
        return (values - vmin) / (vmax - vmin)

    # -------------------------
    # Repères image
    # -------------------------
    @staticmethod
    def pixel_to_normalized(uv: np.ndarray, width: int, height: int) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        scale = np.array([width, height], dtype=np.float64)
        return (uv + 0.5) / scale

    @staticmethod
    def normalized_to_pixel(xy: np.ndarray, width: int, height: int) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        scale = np.array([width, height], dtype=np.float64)
        return xy * scale - 0.5
