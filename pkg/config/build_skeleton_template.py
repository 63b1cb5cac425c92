"""
Génère les gabarits de squelette utilisés par synth_scenes :
skeleton_biped.json (≈1700 mm) et skeleton_quadruped.json (≈250 mm).

Chaque articulation : parent, décalage au repos (mm, repère du corps :
x droite, y avant, z haut), axe de rotation locale, amplitude (degrés).
"""
import json
from pathlib import Path

OUTPUT_DIR = Path(__file__).resolve().parent


def joint(name, parent, offset, axis=(1.0, 0.0, 0.0), amplitude_deg=0.0):
    return {
        "name": name,
        "parent": parent,
        "offset": [float(v) for v in offset],
        "axis": [float(v) for v in axis],
        "amplitude_deg": float(amplitude_deg),
    }


def biped():
    # la tête est la racine ; pieds à z≈50 au repos
    return {
        "name": "biped",
        "height_mm": 1700.0,
        "root_rest": [0.0, 0.0, 1700.0],
        "yaw_amplitude_deg": 30.0,
        "joints": [
            joint("head", None, (0, 0, 0)),
            joint("l_shoulder", "head", (-200, 0, -250), (0, 1, 0), 8),
            joint("r_shoulder", "head", (200, 0, -250), (0, 1, 0), 8),
            joint("l_elbow", "l_shoulder", (-50, 0, -300), (1, 0, 0), 60),
            joint("r_elbow", "r_shoulder", (50, 0, -300), (1, 0, 0), 60),
            joint("l_hip", "l_shoulder", (50, 0, -550), (1, 0, 0), 10),
            joint("r_hip", "r_shoulder", (-50, 0, -550), (1, 0, 0), 10),
            joint("l_foot", "l_hip", (0, 0, -850), (1, 0, 0), 35),
            joint("r_foot", "r_hip", (0, 0, -850), (1, 0, 0), 35),
        ],
    }


def quadruped():
    return {
        "name": "quadruped",
        "height_mm": 250.0,
        "root_rest": [0.0, 0.0, 80.0],
        "yaw_amplitude_deg": 45.0,
        "joints": [
            joint("spine", None, (0, 0, 0)),
            joint("head", "spine", (0, 90, 10), (1, 0, 0), 25),
            joint("tail_base", "spine", (0, -90, 0), (0, 0, 1), 15),
            joint("tail_tip", "tail_base", (0, -70, 0), (0, 0, 1), 40),
            joint("fl_paw", "spine", (-30, 60, -70), (1, 0, 0), 30),
            joint("fr_paw", "spine", (30, 60, -70), (1, 0, 0), 30),
            joint("hl_paw", "tail_base", (-30, 10, -70), (1, 0, 0), 30),
            joint("hr_paw", "tail_base", (30, 10, -70), (1, 0, 0), 30),
        ],
    }


def main():
    for template in (biped(), quadruped()):
        out = OUTPUT_DIR / f"skeleton_{template['name']}.json"
        with open(out, "w", encoding="utf-8") as f:
            json.dump(template, f, indent=2)
        print(f"Gabarit écrit : {out} ({len(template['joints'])} articulations)")


if __name__ == "__main__":
    main()
