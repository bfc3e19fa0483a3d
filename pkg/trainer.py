#!/usr/bin/env python3
"""
Loop de treino (Adam), carga de checkpoints e tabela de ablação
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import RUNTIME_CONFIG
from errors import ConsistencyError, DivergenceError, InvalidArgumentError, StateError
from file_formats import Dataset, load_checkpoint, save_checkpoint, write_metrics
from infer_eval import evaluate, infer_dataset
from losses import LossReport, build_targets, compute_losses
from network import DecoupledDetector
from run_config import ABLATION_MODES, RunConfig
from tensor_autodiff import Tape, Tensor, adam_step, all_finite, backward
from worker_pool import WindowWorkerPool

CHECKPOINT_NAME = 'checkpoint.dssd'
METRICS_NAME = 'metrics.jsonl'


@dataclass
class TrainResult:
    detector: DecoupledDetector
    records: List[Dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    metrics_path: Optional[str] = None

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def final_loss(self) -> float:
        if not self.records:
            raise StateError("nenhum passo de treino executado")
        return self.records[-1]['L_total']


def artifact_header(config: RunConfig, kind: str, **extra) -> Dict:
    """Cabeçalho comum dos artefatos: configuração resolvida + semente"""
    header = {'kind': kind, 'config': config.to_dict(), 'seed': config.train.seed,
              'mode': config.train.ablation_mode}
    header.update(extra)
    return header


class Trainer:
    """Treina um DecoupledDetector sobre um Dataset"""

    def __init__(self, config: RunConfig, data: Dataset, out_dir: Optional[str] = None,
                 threads: Optional[int] = None):
        if not data.windows:
            raise InvalidArgumentError("conjunto de treino vazio")
        net = config.network
        for window in data.windows:
            if window.features.shape != (net.input_dim, net.window_length):
                raise InvalidArgumentError(
                    f"janela {window.video_id} com forma {window.features.shape}, "
                    f"esperado ({net.input_dim}, {net.window_length})")
        self.config = config
        self.train_config = config.train
        self.data = data
        self.out_dir = out_dir
        self.pool = WindowWorkerPool(threads if threads is not None else RUNTIME_CONFIG['threads'])
        self.detector = DecoupledDetector(net, mode=config.train.ablation_mode, seed=config.train.seed)
        self.features = [w.features.astype(np.float64) for w in data.windows]
        self.ground_truths = [data.ground_truths(w) for w in data.windows]
        self.records: List[Dict] = []
        self.step = 0
        self.epoch = 0

    def window_gradients(self, index: int) -> Tuple[Dict[str, np.ndarray], LossReport]:
        """Forward + alvos + perdas + backward de uma janela (sem escrever no ParamStore)"""
        cfg = self.train_config
        tape = Tape()
        outputs = self.detector.forward(tape, Tensor(self.features[index], name='features'))
        targets = build_targets(self.detector.anchors, self.ground_truths[index], cfg.network.anchor_spec,
                                outputs.fused.overlap.data.reshape(-1), cfg,
                                seed=[cfg.seed, self.step, index])
        total, report = compute_losses(tape, outputs, targets, self.detector.anchors, cfg)
        if not np.isfinite(report.L_total):
            culprit = tape.first_non_finite() or 'L_total'
            raise DivergenceError(f"perda não finita no passo {self.step} (janela {index}); "
                                  f"primeiro tensor não finito: {culprit}", culprit)
        return backward(total, tape, self.detector.params), report

    def train_step(self, batch: Sequence[int]) -> LossReport:
        cfg = self.train_config
        params = self.detector.params
        results = self.pool.map(self.window_gradients, list(batch))
        params.zero_grad()
        # merge na ordem da janela: resultado independe do número de workers
        for grads, _ in results:
            params.accumulate(grads, weight=1.0 / len(results))
        culprit = all_finite(params)
        if culprit is not None:
            raise DivergenceError(f"gradiente não finito no passo {self.step}: {culprit}", culprit)
        adam_step(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        culprit = all_finite(params)
        if culprit is not None:
            raise DivergenceError(f"parâmetro não finito após o passo {self.step}: {culprit}", culprit)
        return LossReport.average([report for _, report in results])

    def checkpoint(self) -> Optional[str]:
        if self.out_dir is None:
            return None
        path = os.path.join(self.out_dir, CHECKPOINT_NAME)
        meta = artifact_header(self.config, 'checkpoint', step=self.step, epoch=self.epoch,
                               class_names=list(self.data.class_names))
        save_checkpoint(path, self.detector.params, meta)
        write_metrics(self.metrics_path, artifact_header(self.config, 'metrics'), self.records)
        return path

    @property
    def metrics_path(self) -> Optional[str]:
        return None if self.out_dir is None else os.path.join(self.out_dir, METRICS_NAME)

    def run(self, max_steps: Optional[int] = None) -> TrainResult:
        cfg = self.train_config
        n = len(self.data.windows)
        logging.info(f"Treino: modo {cfg.ablation_mode}, {n} janelas, {cfg.epochs} épocas, "
                     f"{self.detector.params.count()} parâmetros")
        for epoch in range(cfg.epochs):
            self.epoch = epoch
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            epoch_losses = []
            for begin in range(0, n, cfg.batch_size):
                if max_steps is not None and self.step >= max_steps:
                    break
                report = self.train_step(order[begin:begin + cfg.batch_size].tolist())
                record = report.to_record(self.step, epoch)
                self.records.append(record)
                epoch_losses.append(report.L_total)
                logging.debug(f"passo {self.step}: L_total={report.L_total:.6f} "
                              f"(+{report.positives}/-{report.negatives})")
                self.step += 1
                if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.checkpoint()
            if epoch_losses:
                logging.info(f"Época {epoch + 1}/{cfg.epochs}: perda média {np.mean(epoch_losses):.6f}")
            if max_steps is not None and self.step >= max_steps:
                break
            if epoch < cfg.epochs - 1:
                self.checkpoint()
        path = self.checkpoint()
        return TrainResult(self.detector, self.records, path, self.metrics_path)


def train(config: RunConfig, data: Dataset, out_dir: Optional[str] = None, max_steps: Optional[int] = None,
          threads: Optional[int] = None) -> TrainResult:
    return Trainer(config, data, out_dir, threads).run(max_steps)


def load_detector(path: str) -> Tuple[RunConfig, DecoupledDetector, Dict]:
    """Reconstrói configuração e rede a partir de um checkpoint"""
    meta, params = load_checkpoint(path)
    if 'config' not in meta:
        raise StateError(f"checkpoint sem configuração: {path}")
    config = RunConfig(meta['config'])
    mode = meta.get('mode', config.train.ablation_mode)
    expected = DecoupledDetector(config.network, mode=mode, seed=0).params
    if expected.names() != params.names():
        raise ConsistencyError(f"parâmetros do checkpoint não batem com o modo {mode}")
    for name in params.names():
        if params[name].shape != expected[name].shape:
            raise ConsistencyError(f"forma de {name} incompatível: {params[name].shape}")
    return config, DecoupledDetector(config.network, mode=mode, params=params), meta


def run_ablation(config: RunConfig, train_data: Dataset, eval_data: Dataset, out_dir: Optional[str] = None,
                 max_steps: Optional[int] = None, threads: Optional[int] = None) -> pd.DataFrame:
    """
    Treina os cinco modos com a mesma semente e dados e avalia mAP@0.5

    Returns:
        DataFrame com colunas mode, mAP@0.5 e parameters (uma linha por modo)
    """
    thresholds = sorted(set(config.inference.eval_thresholds) | {0.5})
    workers = threads if threads is not None else RUNTIME_CONFIG['threads']
    rows = []
    for mode in ABLATION_MODES:
        mode_config = config.with_overrides(train={'ablation_mode': mode})
        mode_dir = None if out_dir is None else os.path.join(out_dir, mode.replace('+', '_'))
        result = train(mode_config, train_data, mode_dir, max_steps, threads)
        detections = infer_dataset(eval_data.windows, result.detector, mode_config,
                                   eval_data.class_names, workers)
        scores = evaluate(detections, eval_data.annotations, eval_data.class_names, thresholds, workers)
        rows.append({'mode': mode, 'mAP@0.5': scores.map_at(0.5),
                     'parameters': result.detector.params.count()})
        logging.info(f"Ablação {mode}: mAP@0.5 = {scores.map_at(0.5):.4f}")
    return pd.DataFrame(rows, columns=['mode', 'mAP@0.5', 'parameters'])
