#!/usr/bin/env python3
"""
Configuração de execução: dataclasses tipadas + leitor de arquivo `chave = valor`

Formato do arquivo:

    [network]
    base_channels = 32
    rho = 2/3

    [anchors]
    layer_lengths = 8, 4, 2

Chaves e seções desconhecidas são erro (proteção contra erros de digitação).
"""

import copy
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, Optional, Tuple

from anchor_geometry import AnchorSpec
from config import (ANCHOR_CONFIG, INFERENCE_CONFIG, LOSS_CONFIG, NETWORK_CONFIG,
                    SYNTH_CONFIG, TRAIN_CONFIG)
from errors import ConfigError, DetectorError
from tensor_autodiff import conv_output_length

ABLATION_MODES = ('main_only', 'main+prop', 'main+cls', 'refinement', 'full')
REGRESSION_TARGETS = ('decoded', 'encoded')

SECTION_DEFAULTS = {
    'network': NETWORK_CONFIG,
    'anchors': ANCHOR_CONFIG,
    'train': TRAIN_CONFIG,
    'loss': LOSS_CONFIG,
    'synthetic': SYNTH_CONFIG,
    'inference': INFERENCE_CONFIG,
}


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    window_length: int
    base_channels: int
    num_classes: int
    anchor_spec: AnchorSpec
    rho: float = 2 / 3
    head_kernel: int = 3
    base_conv1_stride: int = 1
    base_conv2_stride: int = 2
    base_pool_kernel: int = 2
    base_pool_stride: int = 2
    deconv_kernel: int = 4
    deconv_stride: int = 2
    deconv_padding: int = 1

    def __post_init__(self):
        if min(self.input_dim, self.window_length, self.base_channels, self.num_classes) < 1:
            raise ConfigError("input_dim, window_length, base_channels e num_classes devem ser >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho fora de [0,1]: {self.rho}", key='rho')
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ConfigError(f"head_kernel deve ser ímpar: {self.head_kernel}", key='head_kernel')
        lengths = self.anchor_spec.layer_lengths
        base = self.base_output_length
        if base != 2 * lengths[0]:
            raise ConfigError(
                f"janela {self.window_length} gera base de comprimento {base}, "
                f"esperado 2 x layer_lengths[0] = {2 * lengths[0]}", key='layer_lengths')
        for prev, nxt in zip(lengths, lengths[1:]):
            if nxt != conv_output_length(prev, 3, 2, 1) or prev != 2 * nxt:
                raise ConfigError(f"layer_lengths deve ser uma cadeia de metades: {lengths}",
                                  key='layer_lengths')
        for length in lengths[1:]:
            up = (length - 1) * self.deconv_stride - 2 * self.deconv_padding + self.deconv_kernel
            if up != 2 * length:
                raise ConfigError("deconvolução não dobra o comprimento das camadas", key='deconv_kernel')

    @property
    def num_layers(self) -> int:
        return self.anchor_spec.num_layers

    @property
    def num_ratios(self) -> int:
        return len(self.anchor_spec.ratios)

    @property
    def base_lengths(self) -> Tuple[int, int, int]:
        """Comprimentos após conv1, conv2 e max-pooling da rede base"""
        l1 = conv_output_length(self.window_length, 3, self.base_conv1_stride, 1)
        l2 = conv_output_length(l1, 3, self.base_conv2_stride, 1)
        l3 = (l2 - self.base_pool_kernel) // self.base_pool_stride + 1 if l2 >= self.base_pool_kernel else 0
        return l1, l2, l3

    @property
    def base_output_length(self) -> int:
        return self.base_lengths[2]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 10.0
    omega: float = 2 / 3

    def __post_init__(self):
        for name in ('alpha', 'beta', 'gamma', 'omega'):
            value = getattr(self, name)
            if value != value or value in (float('inf'), float('-inf')):
                raise ConfigError(f"peso {name} não finito", key=name)
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError(f"omega fora de [0,1]: {self.omega}", key='omega')


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkConfig
    loss_weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    ablation_mode: str = 'full'
    negative_ratio: float = 1.0
    hard_overlap: float = 0.5
    zero_positive_negatives: int = 8
    regression_target: str = 'decoded'
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs deve ser >= 1: {self.epochs}", key='epochs')
        if self.batch_size < 1:
            raise ConfigError(f"batch_size deve ser >= 1: {self.batch_size}", key='batch_size')
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"ablation_mode desconhecido: {self.ablation_mode}", key='ablation_mode')
        if self.regression_target not in REGRESSION_TARGETS:
            raise ConfigError(f"regression_target desconhecido: {self.regression_target}",
                              key='regression_target')


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int
    window_length: int
    feature_dim: int
    num_classes: int
    num_eval_videos: int = 50
    actions_min: int = 1
    actions_max: int = 3
    width_min: float = 0.08
    width_max: float = 0.45
    noise_level: float = 0.3
    clip_seconds: float = 0.5
    max_retries: int = 20
    seed: int = 7

    def __post_init__(self):
        if self.num_videos < 0 or self.num_eval_videos < 0:
            raise ConfigError("num_videos não pode ser negativo", key='num_videos')
        if not 0 <= self.actions_min <= self.actions_max:
            raise ConfigError("actions_min/actions_max inválidos", key='actions_max')
        if not 0.0 < self.width_min <= self.width_max <= 1.0:
            raise ConfigError("width_min/width_max devem satisfazer 0 < min <= max <= 1", key='width_min')
        if self.noise_level < 0 or self.clip_seconds <= 0:
            raise ConfigError("noise_level/clip_seconds inválidos", key='noise_level')


@dataclass(frozen=True)
class InferenceConfig:
    nms_threshold: float = 0.2
    min_score: float = 0.0
    score_with_overlap: bool = False
    max_detections_per_video: int = 200
    eval_thresholds: Tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)

    def __post_init__(self):
        object.__setattr__(self, 'eval_thresholds', tuple(float(t) for t in self.eval_thresholds))
        if not 0.0 < self.nms_threshold < 1.0:
            raise ConfigError(f"nms_threshold fora de (0,1): {self.nms_threshold}", key='nms_threshold')


class RunConfig:
    """Configuração resolvida de uma execução (todas as seções)"""

    def __init__(self, sections: Optional[Dict[str, Dict[str, Any]]] = None):
        resolved = copy.deepcopy({name: dict(values) for name, values in SECTION_DEFAULTS.items()})
        for section, values in (sections or {}).items():
            if section not in resolved:
                raise ConfigError(f"seção desconhecida: [{section}]", key=section)
            for key, value in values.items():
                if key not in resolved[section]:
                    raise ConfigError(f"chave desconhecida: {section}.{key}", key=key)
                resolved[section][key] = value
        self.sections = resolved
        try:
            self._build()
        except ConfigError:
            raise
        except (DetectorError, TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def _build(self):
        s = self.sections
        self.anchor_spec = AnchorSpec(**s['anchors'])
        self.network = NetworkConfig(anchor_spec=self.anchor_spec, **s['network'])
        self.loss_weights = LossWeights(**s['loss'])
        self.train = TrainConfig(network=self.network, loss_weights=self.loss_weights, **s['train'])
        synth = dict(s['synthetic'])
        self.synthetic = SyntheticSpec(window_length=self.network.window_length,
                                       feature_dim=self.network.input_dim,
                                       num_classes=self.network.num_classes, **synth)
        self.inference = InferenceConfig(**s['inference'])

    @classmethod
    def default(cls) -> 'RunConfig':
        return cls()

    @classmethod
    def tiny(cls, **overrides) -> 'RunConfig':
        """Configuração mínima para checagem de gradientes (< 5000 parâmetros)"""
        sections = {
            'network': {'input_dim': 3, 'window_length': 16, 'base_channels': 4, 'num_classes': 2,
                        'base_conv2_stride': 1},
            'anchors': {'layer_lengths': [4, 2, 1], 'ratios': [0.75, 1.5]},
            'synthetic': {'num_videos': 1, 'num_eval_videos': 1, 'width_min': 0.2, 'width_max': 0.5},
            'train': {'batch_size': 1, 'epochs': 1},
        }
        for key, values in overrides.items():
            sections.setdefault(key, {}).update(values)
        return cls(sections)

    @classmethod
    def full_scale(cls) -> 'RunConfig':
        return cls({
            'network': {'input_dim': 2048, 'window_length': 512, 'num_classes': 20,
                        'base_conv1_stride': 2, 'base_conv2_stride': 2,
                        'base_pool_kernel': 4, 'base_pool_stride': 4},
            'anchors': {'layer_lengths': [16, 8, 4]},
            'train': {'epochs': 30, 'batch_size': 48, 'learning_rate': 1e-4},
        })

    def with_overrides(self, **sections) -> 'RunConfig':
        merged = copy.deepcopy(self.sections)
        for section, values in sections.items():
            merged.setdefault(section, {}).update(values)
        return RunConfig(merged)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return json.loads(json.dumps(self.sections))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"RunConfig({self.to_json()})"


def parse_value(raw: str, default: Any, key: str, line: int) -> Any:
    """Converte o texto para o tipo do valor padrão"""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ('true', 'yes', 'on', '1'):
                return True
            if lowered in ('false', 'no', 'off', '0'):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(Fraction(raw)) if '/' in raw else float(raw)
        if isinstance(default, (list, tuple)):
            items = [item.strip() for item in raw.split(',') if item.strip()]
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return [int(item) for item in items]
            return [float(Fraction(item)) if '/' in item else float(item) for item in items]
        return raw
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"valor inválido para {key}: {raw!r}", key=key, line=line)


def parse_config_text(text: str) -> RunConfig:
    sections: Dict[str, Dict[str, Any]] = {}
    current = None
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split('#', 1)[0].strip()
        if not line:
            continue
        if line.startswith('[') and line.endswith(']'):
            current = line[1:-1].strip()
            if current not in SECTION_DEFAULTS:
                raise ConfigError(f"seção desconhecida: [{current}]", key=current, line=number)
            sections.setdefault(current, {})
            continue
        if '=' not in line:
            raise ConfigError(f"linha sem '=': {raw_line.strip()!r}", line=number)
        if current is None:
            raise ConfigError("chave fora de uma seção", line=number)
        key, value = (part.strip() for part in line.split('=', 1))
        defaults = SECTION_DEFAULTS[current]
        if key not in defaults:
            raise ConfigError(f"chave desconhecida: {current}.{key}", key=key, line=number)
        sections[current][key] = parse_value(value, defaults[key], key, number)
    return RunConfig(sections)


def load_config(path: Optional[str]) -> RunConfig:
    """Lê o arquivo de configuração; None devolve os padrões"""
    if path is None:
        return RunConfig.default()
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"não foi possível ler {path}: {e}")
    return parse_config_text(text)


def render_config(config: RunConfig) -> str:
    """Texto `chave = valor` que reproduz a configuração resolvida"""
    lines = []
    for section, values in config.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, bool):
                text = 'true' if value else 'false'
            elif isinstance(value, list):
                text = ', '.join(repr(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
        lines.append('')
    return '\n'.join(lines)

