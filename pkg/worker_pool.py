#!/usr/bin/env python3
"""
Pool de threads para processar janelas em paralelo

Os resultados voltam na ordem de entrada, então quem consome (merge de gradientes,
concatenação de detecções) é independente do número de workers.
"""

import logging
import threading
from queue import Empty, Queue
from typing import Callable, List, Optional, Sequence, TypeVar

T = TypeVar('T')
R = TypeVar('R')


class WindowWorkerPool:
    """Fila de tarefas (índice, item) consumida por `num_workers` threads"""

    def __init__(self, num_workers: int = 1):
        self.num_workers = max(1, int(num_workers))
        self.stop_event = threading.Event()
        self.task_queue: Queue = Queue()
        self.worker_threads: List[threading.Thread] = []
        self._results: List = []
        self._errors: List[Optional[BaseException]] = []
        self._func: Optional[Callable] = None

    def worker_thread(self):
        """Thread worker para processar tarefas da queue"""
        while not self.stop_event.is_set():
            try:
                task = self.task_queue.get(timeout=1)
            except Empty:
                continue
            if task is None:  # Sinal para parar
                self.task_queue.task_done()
                break
            index, item = task
            try:
                self._results[index] = self._func(item)
            except Exception as e:
                self._errors[index] = e
                logging.debug(f"Erro no worker {threading.current_thread().name}, tarefa {index}: {e}")
            finally:
                self.task_queue.task_done()

    def map(self, func: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """
        Aplica func a cada item

        Returns:
            Resultados na ordem de `items`. A primeira exceção (por índice) é relançada.
        """
        if self.num_workers == 1 or len(items) <= 1:
            return [func(item) for item in items]

        self._func = func
        self._results = [None] * len(items)
        self._errors = [None] * len(items)
        self.stop_event.clear()
        count = min(self.num_workers, len(items))
        for i in range(count):
            worker = threading.Thread(target=self.worker_thread, name=f"Worker-{i}")
            worker.daemon = True
            worker.start()
            self.worker_threads.append(worker)

        for index, item in enumerate(items):
            self.task_queue.put((index, item))
        for _ in self.worker_threads:
            self.task_queue.put(None)
        self.task_queue.join()

        for worker in self.worker_threads:
            worker.join(timeout=5)
        self.worker_threads.clear()

        for error in self._errors:
            if error is not None:
                raise error
        results, self._results, self._errors = self._results, [], []
        return results
