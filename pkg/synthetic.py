#!/usr/bin/env python3
"""
Gerador de dados sintéticos: ruído de fundo + motivos por classe nos segmentos anotados

Cada classe tem um padrão fixo de ativação por canal; a amplitude sobe e desce em
rampa nas bordas do segmento. Segmentos ficam alinhados à grade de clips, então a
anotação corresponde exatamente aos clips onde o motivo foi inserido.
"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np

from file_formats import Annotation, Dataset, FeatureWindow
from run_config import SyntheticSpec

# Semente dos motivos: independente da semente dos dados, treino e avaliação compartilham classes
MOTIF_SEED = 20190131


def class_names(num_classes: int) -> List[str]:
    return [f"action_{c:02d}" for c in range(1, num_classes + 1)]


def class_motif(class_id: int, feature_dim: int, num_classes: int) -> np.ndarray:
    """Vetor [D] de ativação da classe; canais d com d % C == class_id - 1 recebem reforço"""
    rng = np.random.default_rng([MOTIF_SEED, class_id])
    motif = 0.5 * rng.standard_normal(feature_dim)
    motif[np.arange(feature_dim) % num_classes == class_id - 1] += 2.0
    return motif


def envelope(length: int) -> np.ndarray:
    """Trapézio de comprimento `length`: rampa de ~1/4 do segmento em cada borda"""
    if length <= 0:
        return np.zeros(0)
    ramp = max(1, length // 4)
    i = np.arange(length, dtype=np.float64)
    rise = (i + 1) / (ramp + 1)
    fall = (length - i) / (ramp + 1)
    return np.minimum(1.0, np.minimum(rise, fall))


def render_action(features: np.ndarray, class_id: int, first: int, last: int, num_classes: int) -> None:
    """Soma o motivo da classe nos clips [first, last) da janela"""
    motif = class_motif(class_id, features.shape[0], num_classes)
    features[:, first:last] += motif[:, None] * envelope(last - first)[None, :]


def _draw_segments(rng: np.random.Generator, spec: SyntheticSpec) -> List[Tuple[int, int, int]]:
    """Sorteia (classe, primeiro clip, último clip exclusivo) sem sobreposição"""
    T = spec.window_length
    min_len = max(1, math.ceil(spec.width_min * T))
    max_len = max(min_len, math.floor(spec.width_max * T))
    wanted = int(rng.integers(spec.actions_min, spec.actions_max + 1))
    segments: List[Tuple[int, int, int]] = []
    for _ in range(wanted):
        for _attempt in range(spec.max_retries + 1):
            length = int(rng.integers(min_len, max_len + 1))
            first = int(rng.integers(0, T - length + 1))
            last = first + length
            class_id = int(rng.integers(1, spec.num_classes + 1))
            if all(last <= a or first >= b for _, a, b in segments):
                segments.append((class_id, first, last))
                break
        else:
            logging.debug(f"Segmento descartado após {spec.max_retries} tentativas")
    return sorted(segments, key=lambda s: s[1])


def generate_window(spec: SyntheticSpec, index: int, seed: int, prefix: str = 'synth'
                    ) -> Tuple[FeatureWindow, List[Annotation]]:
    """Uma janela determinística dada (seed, index)"""
    rng = np.random.default_rng([seed, index])
    T = spec.window_length
    names = class_names(spec.num_classes)
    video_id = f"{prefix}_{index:04d}"

    features = np.zeros((spec.feature_dim, T))
    if spec.noise_level > 0:
        features += spec.noise_level * rng.standard_normal((spec.feature_dim, T))
    segments = _draw_segments(rng, spec)

    annotations = []
    for class_id, first, last in segments:
        render_action(features, class_id, first, last, spec.num_classes)
        annotations.append(Annotation(video_id, first * spec.clip_seconds, last * spec.clip_seconds,
                                      names[class_id - 1]))
    window = FeatureWindow(video_id, 0.0, spec.clip_seconds, features.astype(np.float32))
    return window, annotations


def generate_synthetic(spec: SyntheticSpec, num_videos: Optional[int] = None, seed: Optional[int] = None,
                       prefix: str = 'synth') -> Dataset:
    """
    Conjunto sintético completo (uma janela por vídeo)

    Args:
        spec: parâmetros do gerador
        num_videos: sobrescreve spec.num_videos (conjunto de avaliação)
        seed: sobrescreve spec.seed

    Returns:
        Dataset com janelas, anotações em segundos e nomes de classe
    """
    count = spec.num_videos if num_videos is None else num_videos
    seed = spec.seed if seed is None else seed
    windows, annotations = [], []
    for index in range(count):
        window, anns = generate_window(spec, index, seed, prefix)
        windows.append(window)
        annotations.extend(anns)
    logging.info(f"Gerado conjunto sintético '{prefix}': {count} janelas, {len(annotations)} ações")
    return Dataset(windows, annotations, class_names(spec.num_classes))


def generate_train_eval(spec: SyntheticSpec) -> Tuple[Dataset, Dataset]:
    """Par treino/avaliação com sementes distintas e os mesmos motivos de classe"""
    train = generate_synthetic(spec, prefix='synth')
    evaluation = generate_synthetic(spec, num_videos=spec.num_eval_videos, seed=spec.seed + 1,
                                    prefix='synth_eval')
    return train, evaluation
