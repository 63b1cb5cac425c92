"""
Gestionnaire singleton du pool de workers
Crée le ThreadPoolExecutor partagé une seule fois ; --threads N en fixe la taille.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from threading import Lock
from typing import Callable, Iterable, List, Optional

logger = logging.getLogger(__name__)


class WorkerPool:
    """Singleton pour le pool de threads partagé par tous les modules"""

    _instance = None
    _executor: Optional[ThreadPoolExecutor] = None
    _threads = 1
    _lock = Lock()

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(WorkerPool, cls).__new__(cls)
        return cls._instance

    @classmethod
    def configure(cls, threads: int = 1) -> "WorkerPool":
        """
        threads=1 : exécution séquentielle dans le thread appelant
        (déterminisme bit à bit).
        """
        threads = max(1, int(threads))
        with cls._lock:
            if cls._executor is not None and threads != cls._threads:
                cls._executor.shutdown(wait=True)
                cls._executor = None

            cls._threads = threads
            if threads > 1 and cls._executor is None:
                start = time.time()
                cls._executor = ThreadPoolExecutor(
                    max_workers=threads,
                    thread_name_prefix="mvkd-worker"
                )
                logger.debug(f"[POOL] executor {threads} threads prêt en {time.time() - start:.3f}s")
        return cls()

    @classmethod
    def threads(cls) -> int:
        return cls._threads

    @classmethod
    def map_ordered(cls, fn: Callable, items: Iterable) -> List:
        """Applique fn et renvoie les résultats dans l'ordre des entrées."""
        items = list(items)
        if cls._executor is None or cls._threads == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        return list(cls._executor.map(fn, items))

    @classmethod
    def shutdown(cls):
        """Fermeture propre du pool si besoin"""
        with cls._lock:
            if cls._executor is not None:
                cls._executor.shutdown(wait=True)
                cls._executor = None
            cls._threads = 1
