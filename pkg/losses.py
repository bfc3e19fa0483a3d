#!/usr/bin/env python3
"""
Funções de perda: classificação (softmax), regressão (Smooth L1) e overlap (MSE)

    L       = alpha * L_cls + beta * L_reg + gamma * L_ov
    L_cls   = omega * L_cls_m + (1 - omega) * L_cls_c      (idem L_reg e L_ov)

Termos do main stream usam as saídas cruas do main stream; termos de ramo usam as
saídas fundidas. Cada termo é a média sobre o conjunto amostrado da janela.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from anchor_geometry import (AnchorSpec, MatchResult, Segment, anchor_arrays, encode_arrays,
                             hard_negative_mining, match_anchors)
from errors import InvalidArgumentError
from run_config import LossWeights, TrainConfig
from tensor_autodiff import Tape, Tensor

COMPONENTS = ('L_cls_m', 'L_cls_c', 'L_reg_m', 'L_reg_p', 'L_ov_m', 'L_ov_p')


@dataclass
class WindowTargets:
    """Alvos de uma janela: rótulos, IoU, ground truth associado e índices amostrados"""

    labels: np.ndarray
    g_iou: np.ndarray
    gt_centers: np.ndarray
    gt_widths: np.ndarray
    selected: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)

    @property
    def num_positives(self) -> int:
        return int(self.positives.size)

    @property
    def num_negatives(self) -> int:
        return int(self.selected.size - np.count_nonzero(self.labels[self.selected] > 0))


@dataclass
class LossReport:
    L_cls_m: float = 0.0
    L_cls_c: float = 0.0
    L_reg_m: float = 0.0
    L_reg_p: float = 0.0
    L_ov_m: float = 0.0
    L_ov_p: float = 0.0
    L_total: float = 0.0
    positives: int = 0
    negatives: int = 0
    warnings: List[str] = field(default_factory=list)

    def components(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in COMPONENTS}

    def to_record(self, step: int, epoch: int) -> Dict:
        record = {'step': step, 'epoch': epoch}
        record.update(self.components())
        record.update({'L_total': self.L_total, 'positives': self.positives, 'negatives': self.negatives})
        return record

    @classmethod
    def average(cls, reports: Sequence['LossReport']) -> 'LossReport':
        """Média dos termos sobre as janelas de um passo; contagens somadas"""
        if not reports:
            raise InvalidArgumentError("nenhum relatório para agregar")
        merged = cls()
        for name in COMPONENTS + ('L_total',):
            setattr(merged, name, float(np.mean([getattr(r, name) for r in reports])))
        merged.positives = sum(r.positives for r in reports)
        merged.negatives = sum(r.negatives for r in reports)
        merged.warnings = sorted({w for r in reports for w in r.warnings})
        return merged


# ------------------------------------------------------------------- alvos

def build_targets(anchors, gts: Sequence[Tuple[Segment, int]], spec: AnchorSpec,
                  predicted_overlap: np.ndarray, config: TrainConfig, seed=0) -> WindowTargets:
    """Matching + mineração de negativos para uma janela"""
    matches: MatchResult = match_anchors(anchors, gts, spec.match_threshold)
    selected = hard_negative_mining(matches, predicted_overlap, config.negative_ratio, seed=seed,
                                    hard_overlap=config.hard_overlap,
                                    fallback=config.zero_positive_negatives)
    n = len(anchors)
    gt_centers = np.zeros(n)
    gt_widths = np.zeros(n)
    pos = matches.positive
    if pos.any():
        centers = np.array([g.center for g, _ in gts])
        widths = np.array([g.width for g, _ in gts])
        gt_centers[pos] = centers[matches.matched[pos]]
        gt_widths[pos] = widths[matches.matched[pos]]
    return WindowTargets(matches.labels, matches.g_iou, gt_centers, gt_widths, selected)


# ------------------------------------------------------------------- termos

def _zero() -> Tensor:
    return Tensor(np.zeros((1, 1)), name='zero')


def smooth_l1(x):
    """0.5 x^2 se |x| < 1, senão |x| - 0.5"""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def classification_loss(tape: Tape, probs: Tensor, targets: np.ndarray, selected: np.ndarray,
                        flags: Optional[List[str]] = None, name: str = 'L_cls') -> Tensor:
    """Média de -log p_alvo sobre as âncoras selecionadas"""
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0:
        if flags is not None:
            flags.append(f"{name}: seleção vazia")
        return _zero()
    targets = np.asarray(targets, dtype=np.int64)
    nll = tape.pick_log(probs, selected, targets[selected], name=f"{name}.nll")
    return tape.mean(nll, name=name)


def regression_loss(tape: Tape, delta_c: Tensor, delta_w: Tensor, anchor_centers: np.ndarray,
                    anchor_widths: np.ndarray, gt_centers: np.ndarray, gt_widths: np.ndarray,
                    positives: np.ndarray, spec: AnchorSpec, target: str = 'decoded',
                    flags: Optional[List[str]] = None, name: str = 'L_reg') -> Tensor:
    """
    Smooth L1 entre o segmento decodificado e o ground truth associado (somente positivos)

    Com target='encoded' compara os deltas previstos com os alvos codificados.
    """
    positives = np.asarray(positives, dtype=np.int64)
    if positives.size == 0:
        if flags is not None:
            flags.append(f"{name}: nenhum positivo")
        return _zero()
    a_c = anchor_centers[positives].reshape(-1, 1)
    a_w = anchor_widths[positives].reshape(-1, 1)
    g_c = gt_centers[positives].reshape(-1, 1)
    g_w = gt_widths[positives].reshape(-1, 1)
    dc = tape.gather_rows(delta_c, positives, name=f"{name}.dc")
    dw = tape.gather_rows(delta_w, positives, name=f"{name}.dw")

    if target == 'decoded':
        # phi_c - g_c = a_c + alpha1 * a_w * dc - g_c
        diff_c = tape.affine(dc, spec.alpha1 * a_w, a_c - g_c, name=f"{name}.diff_c")
        # phi_w - g_w = a_w * exp(alpha2 * dw) - g_w
        scaled = tape.exp(tape.affine(dw, spec.alpha2), name=f"{name}.exp_w")
        diff_w = tape.affine(scaled, a_w, -g_w, name=f"{name}.diff_w")
    elif target == 'encoded':
        t_c, t_w = encode_arrays(a_c, a_w, g_c, g_w, spec)
        diff_c = tape.affine(dc, 1.0, -t_c, name=f"{name}.diff_c")
        diff_w = tape.affine(dw, 1.0, -t_w, name=f"{name}.diff_w")
    else:
        raise InvalidArgumentError(f"regression target desconhecido: {target}")

    term_c = tape.mean(tape.smooth_l1(diff_c), name=f"{name}.c")
    term_w = tape.mean(tape.smooth_l1(diff_w), name=f"{name}.w")
    return tape.linear_combination([(1.0, term_c), (1.0, term_w)], name=name)


def overlap_loss(tape: Tape, overlap: Tensor, g_iou: np.ndarray, selected: np.ndarray,
                 flags: Optional[List[str]] = None, name: str = 'L_ov') -> Tensor:
    """Erro quadrático médio entre p_ov e g_iou nas âncoras selecionadas"""
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0:
        if flags is not None:
            flags.append(f"{name}: seleção vazia")
        return _zero()
    picked = tape.gather_rows(overlap, selected, name=f"{name}.pov")
    target = np.asarray(g_iou, dtype=np.float64)[selected].reshape(-1, 1)
    err = tape.square(tape.affine(picked, 1.0, -target), name=f"{name}.sq")
    return tape.mean(err, name=name)


def loss_coefficients(weights: LossWeights, has_cls: bool = True, has_prop: bool = True) -> Dict[str, float]:
    """Coeficiente de cada componente no total; ramo ausente leva omega a 1 nos seus termos"""
    omega_c = weights.omega if has_cls else 1.0
    omega_p = weights.omega if has_prop else 1.0
    return {
        'L_cls_m': weights.alpha * omega_c,
        'L_cls_c': weights.alpha * (1.0 - omega_c),
        'L_reg_m': weights.beta * omega_p,
        'L_reg_p': weights.beta * (1.0 - omega_p),
        'L_ov_m': weights.gamma * omega_p,
        'L_ov_p': weights.gamma * (1.0 - omega_p),
    }


def total_loss(components: Dict[str, float], weights: LossWeights, has_cls: bool = True,
               has_prop: bool = True) -> float:
    """Combinação linear exata dos seis componentes"""
    coefs = loss_coefficients(weights, has_cls, has_prop)
    missing = [name for name in COMPONENTS if name not in components]
    if missing:
        raise InvalidArgumentError(f"componentes ausentes: {missing}")
    return float(sum(coefs[name] * float(components[name]) for name in COMPONENTS))


def compute_losses(tape: Tape, outputs, targets: WindowTargets, anchors, config: TrainConfig
                   ) -> Tuple[Tensor, LossReport]:
    """
    Perda total de uma janela no registro + relatório com os componentes

    Args:
        outputs: NetworkOutputs do forward da janela
        targets: alvos de build_targets
        anchors: âncoras na ordem de generate_anchors

    Returns:
        (tensor escalar da perda total, LossReport)
    """
    spec = config.network.anchor_spec
    flags: List[str] = []
    centers, widths = anchor_arrays(anchors)
    positives = targets.positives
    selected = targets.selected
    target_kind = config.regression_target

    terms = {
        'L_cls_m': classification_loss(tape, outputs.main.probs, targets.labels, selected, flags, 'L_cls_m'),
        'L_reg_m': regression_loss(tape, outputs.main.delta_c, outputs.main.delta_w, centers, widths,
                                   targets.gt_centers, targets.gt_widths, positives, spec, target_kind,
                                   flags, 'L_reg_m'),
        'L_ov_m': overlap_loss(tape, outputs.main.overlap, targets.g_iou, selected, flags, 'L_ov_m'),
    }
    fused = outputs.fused
    if outputs.has_cls:
        terms['L_cls_c'] = classification_loss(tape, fused.probs, targets.labels, selected, flags, 'L_cls_c')
    else:
        terms['L_cls_c'] = _zero()
    if outputs.has_prop:
        terms['L_reg_p'] = regression_loss(tape, fused.delta_c, fused.delta_w, centers, widths,
                                           targets.gt_centers, targets.gt_widths, positives, spec,
                                           target_kind, flags, 'L_reg_p')
        terms['L_ov_p'] = overlap_loss(tape, fused.overlap, targets.g_iou, selected, flags, 'L_ov_p')
    else:
        terms['L_reg_p'] = _zero()
        terms['L_ov_p'] = _zero()

    coefs = loss_coefficients(config.loss_weights, outputs.has_cls, outputs.has_prop)
    total = tape.linear_combination([(coefs[name], terms[name]) for name in COMPONENTS], name='L_total')

    report = LossReport(positives=targets.num_positives, negatives=targets.num_negatives, warnings=flags)
    for name in COMPONENTS:
        setattr(report, name, terms[name].item())
    report.L_total = total.item()
    if flags:
        logging.debug(f"Avisos de perda: {', '.join(flags)}")
    return total, report
