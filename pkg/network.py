#!/usr/bin/env python3
"""
Rede de âncoras com três ramos: main stream, ramo de classificação e ramo de proposta

    base:      conv -> relu -> conv -> relu -> maxpool
    main:      N_l convs stride 2 encadeadas, cada uma com uma camada de âncoras
    ramos:     f^{N_l} = C1(f_m^{N_l})
               f^j     = C2(S(C3(f_m^j), D(f^{j+1})))        (j < N_l)
    fusão:     média dos ramos com o main stream

Os parâmetros de cada ramo são exclusivos dele (desacoplamento estrutural).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from anchor_geometry import Anchor, generate_anchors
from errors import ConsistencyError, InvalidArgumentError
from run_config import NetworkConfig
from tensor_autodiff import ParamStore, Tape, Tensor

# Torres por modo de ablação
MODE_TOWERS = {
    'main_only': (),
    'main+cls': ('cls',),
    'main+prop': ('prop',),
    'refinement': ('ref',),
    'full': ('cls', 'prop'),
}

TOWER_KINDS = {'cls': 'classification', 'prop': 'proposal', 'ref': 'refinement'}
KIND_TOWERS = {kind: tower for tower, kind in TOWER_KINDS.items()}


@dataclass
class BranchOutputs:
    """Predições por âncora de um ramo; campos ausentes ficam None"""

    probs: Optional[Tensor] = None      # [A x C+1], pós-softmax
    overlap: Optional[Tensor] = None    # [A x 1], em [0,1]
    delta_c: Optional[Tensor] = None    # [A x 1]
    delta_w: Optional[Tensor] = None    # [A x 1]

    @property
    def num_anchors(self) -> int:
        for t in (self.probs, self.overlap, self.delta_c, self.delta_w):
            if t is not None:
                return t.shape[0]
        return 0


@dataclass
class FusedOutputs:
    probs: Tensor
    overlap: Tensor
    delta_c: Tensor
    delta_w: Tensor


@dataclass
class NetworkOutputs:
    main: BranchOutputs
    fused: FusedOutputs
    cls: Optional[BranchOutputs] = None
    prop: Optional[BranchOutputs] = None
    maps: Dict[str, List[Tensor]] = field(default_factory=dict)

    @property
    def has_cls(self) -> bool:
        return self.cls is not None and self.cls.probs is not None

    @property
    def has_prop(self) -> bool:
        return self.prop is not None and self.prop.overlap is not None


def fuse(tape: Tape, main: BranchOutputs, cls_branch: Optional[BranchOutputs],
         prop_branch: Optional[BranchOutputs]) -> FusedOutputs:
    """
    Fusão por média: p_c' = (p + p_c)/2, p_ov' = (p_ov + p_ov_p)/2, deltas idem

    Um ramo ausente (None) deixa o campo correspondente igual ao do main stream.
    """
    n = main.num_anchors
    for branch in (cls_branch, prop_branch):
        if branch is not None and branch.num_anchors != n:
            raise InvalidArgumentError(f"fusão com âncoras desalinhadas: {branch.num_anchors} vs {n}")

    probs = main.probs
    if cls_branch is not None and cls_branch.probs is not None:
        probs = tape.weighted_sum(main.probs, cls_branch.probs, 0.5, name='fused.probs')
    overlap, delta_c, delta_w = main.overlap, main.delta_c, main.delta_w
    if prop_branch is not None and prop_branch.overlap is not None:
        overlap = tape.weighted_sum(main.overlap, prop_branch.overlap, 0.5, name='fused.overlap')
        delta_c = tape.weighted_sum(main.delta_c, prop_branch.delta_c, 0.5, name='fused.delta_c')
        delta_w = tape.weighted_sum(main.delta_w, prop_branch.delta_w, 0.5, name='fused.delta_w')
    return FusedOutputs(probs, overlap, delta_c, delta_w)


class DecoupledDetector:
    """Rede completa com parâmetros num ParamStore"""

    def __init__(self, config: NetworkConfig, mode: str = 'full', seed: int = 0,
                 params: Optional[ParamStore] = None):
        if mode not in MODE_TOWERS:
            raise InvalidArgumentError(f"modo de ablação desconhecido: {mode}")
        self.config = config
        self.mode = mode
        self.towers = MODE_TOWERS[mode]
        self.anchors: List[Anchor] = generate_anchors(config.anchor_spec)
        self.params = params if params is not None else self.init_params(seed)

    # ---------------------------------------------------------- parâmetros

    def _conv(self, store: ParamStore, rng, name: str, out_ch: int, in_ch: int, k: int, bias=True):
        store.glorot(f"{name}.w", (out_ch, in_ch, k), in_ch * k, out_ch * k, rng)
        if bias:
            store.zeros(f"{name}.b", (out_ch,))

    def init_params(self, seed: int) -> ParamStore:
        """Inicialização determinística: base e main stream primeiro, depois as torres"""
        cfg = self.config
        ch = cfg.base_channels
        k = cfg.head_kernel
        r = cfg.num_ratios
        c1 = cfg.num_classes + 1
        rng = np.random.default_rng(seed)
        store = ParamStore()

        self._conv(store, rng, 'base.conv1', ch, cfg.input_dim, 3)
        self._conv(store, rng, 'base.conv2', ch, ch, 3)
        for j in range(cfg.num_layers):
            self._conv(store, rng, f"main.l{j}.conv", ch, ch, 3)
        for j in range(cfg.num_layers):
            self._conv(store, rng, f"main.l{j}.head", r * (c1 + 3), ch, k)

        for tower in self.towers:
            top = cfg.num_layers - 1
            for u in range(3):
                self._conv(store, rng, f"{tower}.l{top}.c1.u{u}", ch, ch, 3)
            for j in range(top):
                self._conv(store, rng, f"{tower}.l{j}.c3", ch, ch, 3)
                store.glorot(f"{tower}.l{j}.deconv.w", (ch, ch, cfg.deconv_kernel),
                             ch * cfg.deconv_kernel, ch * cfg.deconv_kernel, rng)
                self._conv(store, rng, f"{tower}.l{j}.c2.u0", ch, ch, 3)
                self._conv(store, rng, f"{tower}.l{j}.c2.u1", ch, ch, 3)
            for j in range(cfg.num_layers):
                if tower in ('cls', 'ref'):
                    self._conv(store, rng, f"{tower}.l{j}.cls_head", r * c1, ch, k)
                if tower in ('prop', 'ref'):
                    self._conv(store, rng, f"{tower}.l{j}.prop_head", r * 3, ch, k)
        return store

    def tower_parameters(self, tower: str) -> List[str]:
        prefix = f"{tower}."
        return [name for name in self.params.names() if name.startswith(prefix)]

    def _apply_conv(self, tape: Tape, x: Tensor, name: str, stride: int = 1, padding: int = 1) -> Tensor:
        bias = self.params[f"{name}.b"] if f"{name}.b" in self.params else None
        return tape.conv1d(x, self.params[f"{name}.w"], bias, stride, padding, name=name)

    # -------------------------------------------------------------- forward

    def base_forward(self, tape: Tape, features: Tensor) -> Tensor:
        cfg = self.config
        if features.data.ndim != 2 or features.shape != (cfg.input_dim, cfg.window_length):
            raise InvalidArgumentError(
                f"features com forma {features.shape}, esperado ({cfg.input_dim}, {cfg.window_length})")
        x = tape.relu(self._apply_conv(tape, features, 'base.conv1', cfg.base_conv1_stride), name='base.relu1')
        x = tape.relu(self._apply_conv(tape, x, 'base.conv2', cfg.base_conv2_stride), name='base.relu2')
        return tape.maxpool1d(x, cfg.base_pool_kernel, cfg.base_pool_stride, name='base.pool')

    def _head_rows(self, tape: Tape, maps: List[Tensor], head: str) -> Tensor:
        pad = self.config.head_kernel // 2
        rows = []
        for j, fmap in enumerate(maps):
            out = self._apply_conv(tape, fmap, head.format(j=j), padding=pad)
            rows.append(tape.to_anchor_rows(out, self.config.num_ratios, name=f"{head.format(j=j)}.rows"))
        return rows[0] if len(rows) == 1 else tape.concat_rows(rows, name=head.format(j='all'))

    def _class_probs(self, tape: Tape, rows: Tensor, prefix: str) -> Tensor:
        c1 = self.config.num_classes + 1
        return tape.softmax(tape.columns(rows, 0, c1, name=f"{prefix}.scores"), name=f"{prefix}.probs")

    def _localization(self, tape: Tape, rows: Tensor, offset: int, prefix: str):
        overlap = tape.sigmoid(tape.columns(rows, offset, offset + 1), name=f"{prefix}.overlap")
        delta_c = tape.columns(rows, offset + 1, offset + 2, name=f"{prefix}.delta_c")
        delta_w = tape.columns(rows, offset + 2, offset + 3, name=f"{prefix}.delta_w")
        return overlap, delta_c, delta_w

    def main_stream_forward(self, tape: Tape, base: Tensor) -> Tuple[List[Tensor], BranchOutputs]:
        maps = []
        x = base
        for j in range(self.config.num_layers):
            x = tape.relu(self._apply_conv(tape, x, f"main.l{j}.conv", stride=2), name=f"main.l{j}.relu")
            if x.length != self.config.anchor_spec.layer_lengths[j]:
                raise ConsistencyError(f"main.l{j}: comprimento {x.length}, esperado "
                                       f"{self.config.anchor_spec.layer_lengths[j]}")
            maps.append(x)
        rows = self._head_rows(tape, maps, 'main.l{j}.head')
        overlap, delta_c, delta_w = self._localization(tape, rows, self.config.num_classes + 1, 'main')
        return maps, BranchOutputs(self._class_probs(tape, rows, 'main'), overlap, delta_c, delta_w)

    def refinement_branch_forward(self, tape: Tape, kind: str,
                                  main_maps: List[Tensor]) -> Tuple[List[Tensor], BranchOutputs]:
        """
        Torre de refinamento (classification, proposal ou refinement compartilhada)

        Args:
            kind: 'classification', 'proposal' ou 'refinement'
            main_maps: mapas f_m^j do main stream

        Returns:
            mapas da torre e as predições da(s) cabeça(s) dela
        """
        tower = KIND_TOWERS.get(kind)
        if tower is None or tower not in self.towers:
            raise InvalidArgumentError(f"ramo {kind} não existe no modo {self.mode}")
        cfg = self.config
        top = cfg.num_layers - 1
        maps: List[Optional[Tensor]] = [None] * cfg.num_layers

        x = main_maps[top]
        for u in range(3):
            x = tape.relu(self._apply_conv(tape, x, f"{tower}.l{top}.c1.u{u}"), name=f"{tower}.l{top}.c1.r{u}")
        maps[top] = x

        for j in range(top - 1, -1, -1):
            lateral = tape.relu(main_maps[j], name=f"{tower}.l{j}.c3.r0")
            lateral = self._apply_conv(tape, lateral, f"{tower}.l{j}.c3")
            lateral = tape.relu(lateral, name=f"{tower}.l{j}.c3.r1")
            deep = tape.deconv1d(maps[j + 1], self.params[f"{tower}.l{j}.deconv.w"], cfg.deconv_stride,
                                 cfg.deconv_padding, name=f"{tower}.l{j}.deconv")
            if deep.length != lateral.length:
                raise ConsistencyError(f"{tower}.l{j}: deconvolução gerou {deep.length}, "
                                       f"esperado {lateral.length}")
            merged = tape.weighted_sum(lateral, deep, cfg.rho, name=f"{tower}.l{j}.sum")
            y = tape.relu(self._apply_conv(tape, merged, f"{tower}.l{j}.c2.u0"), name=f"{tower}.l{j}.c2.r0")
            maps[j] = self._apply_conv(tape, y, f"{tower}.l{j}.c2.u1")

        outputs = BranchOutputs()
        if tower in ('cls', 'ref'):
            rows = self._head_rows(tape, maps, f"{tower}.l{{j}}.cls_head")
            outputs.probs = self._class_probs(tape, rows, f"{tower}.cls")
        if tower in ('prop', 'ref'):
            rows = self._head_rows(tape, maps, f"{tower}.l{{j}}.prop_head")
            outputs.overlap, outputs.delta_c, outputs.delta_w = self._localization(tape, rows, 0, f"{tower}.prop")
        return maps, outputs

    def forward(self, tape: Tape, features: Tensor) -> NetworkOutputs:
        base = self.base_forward(tape, features)
        main_maps, main = self.main_stream_forward(tape, base)
        maps = {'base': [base], 'main': main_maps}
        cls_out = prop_out = None
        for tower in self.towers:
            tower_maps, out = self.refinement_branch_forward(tape, TOWER_KINDS[tower], main_maps)
            maps[tower] = tower_maps
            if out.probs is not None:
                cls_out = out
            if out.overlap is not None:
                prop_out = out
        if cls_out is not None and prop_out is not None and cls_out is prop_out:
            # torre única com as duas cabeças
            cls_out = BranchOutputs(probs=cls_out.probs)
            prop_out = BranchOutputs(overlap=prop_out.overlap, delta_c=prop_out.delta_c,
                                     delta_w=prop_out.delta_w)
        fused = fuse(tape, main, cls_out, prop_out)
        return NetworkOutputs(main=main, fused=fused, cls=cls_out, prop=prop_out, maps=maps)

    def predict(self, features: np.ndarray) -> NetworkOutputs:
        """Forward sem uso posterior do registro (inferência)"""
        return self.forward(Tape(), Tensor(features, name='features'))
