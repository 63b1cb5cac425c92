from pathlib import Path
from typing import Dict, Optional

import cv2
import numpy as np

from utils.normalize import Normalize


class ProcessImage:
    """
    Chargement et préparation des images (PNG/PGM, conteneur MVKD, .npy)
    vers des tableaux flottants dans [0,1].
    """

    def __init__(self, image_path: Optional[str] = None, image: Optional[np.ndarray] = None):
        self.image_path = image_path
        self.image = image

        if self.image is None and self.image_path:
            self.image = self.read(self.image_path)

        if self.image is None:
            raise ValueError(f"Aucune image valide fournie: {image_path}")

    # -------------------------
    # Lecture / écriture
    # -------------------------
    @staticmethod
    def read(path) -> np.ndarray:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Image introuvable: {path}")

        suffix = path.suffix.lower()
        if suffix == ".mvkd":
            from io_formats import read_mvkd
            values, _ = read_mvkd(path)
            return values[:, :, 0] if values.shape[2] == 1 else values
        if suffix == ".npy":
            return np.load(path)

        img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ValueError(f"Image illisible: {path}")
        return img

    @staticmethod
    def write(path, values: np.ndarray) -> None:
        """Écrit une carte [0,1] en niveaux de gris 8 bits (PNG ou PGM selon l'extension)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        img = np.round(Normalize.clamp_unit(values) * 255.0).astype(np.uint8)
        if not cv2.imwrite(str(path), img):
            raise ValueError(f"Écriture impossible: {path}")

    # -------------------------
    # Méthodes utilitaires
    # -------------------------
    def to_unit(self, img: Optional[np.ndarray] = None) -> np.ndarray:
        img = img if img is not None else self.image
        return Normalize.to_unit_range(img)

    def to_gray(self, img: Optional[np.ndarray] = None) -> np.ndarray:
        """Luminance dans [0,1] ; cv2 lit les images couleur en BGR."""
        unit = self.to_unit(img)
        return Normalize.to_luma(unit, channel_order="BGR")

    def resize(self, height: int, width: int, img: Optional[np.ndarray] = None) -> np.ndarray:
        img = img if img is not None else self.to_gray()
        h, w = img.shape[:2]
        if (h, w) == (height, width):
            return img
        interpolation = cv2.INTER_AREA if height < h else cv2.INTER_LINEAR
        return cv2.resize(img, (width, height), interpolation=interpolation)

    def to_pil(self):
        from PIL import Image
        img = np.round(Normalize.clamp_unit(self.image) * 255.0).astype(np.uint8)
        return Image.fromarray(img)

    @staticmethod
    def write_annotated(path, values: np.ndarray, info: Dict[str, object]) -> None:
        """PNG avec métadonnées texte (tEXt) ; les autres extensions passent par write()."""
        path = Path(path)
        if path.suffix.lower() != ".png":
            ProcessImage.write(path, values)
            return
        from PIL.PngImagePlugin import PngInfo
        meta = PngInfo()
        for key, value in info.items():
            meta.add_text(str(key), str(value))
        path.parent.mkdir(parents=True, exist_ok=True)
        ProcessImage(image=values).to_pil().save(path, pnginfo=meta)
