"""
Exécution d'un fichier de tests en script (python test_xxx.py), hors pytest.
Les tests qui demandent `tmp_path` reçoivent un répertoire temporaire.
"""
import inspect
import tempfile
import traceback
from pathlib import Path
from typing import Callable, Dict, List


def collect(namespace: Dict) -> List[Callable]:
    return [fn for name, fn in namespace.items() if name.startswith("test_") and callable(fn)]


def run_tests(tests: List[Callable]) -> int:
    failed = 0
    for i, test in enumerate(tests, 1):
        print("=" * 70)
        print(f"Test {i}: {test.__name__}")
        print("-" * 70)
        try:
            if "tmp_path" in inspect.signature(test).parameters:
                with tempfile.TemporaryDirectory() as tmp:
                    test(tmp_path=Path(tmp))
            else:
                test()
            print("Test RÉUSSI")
        except Exception:
            traceback.print_exc()
            print("Test ÉCHOUÉ")
            failed += 1
    print("=" * 70)
    print(f"{len(tests) - failed}/{len(tests)} tests réussis")
    return 1 if failed else 0
