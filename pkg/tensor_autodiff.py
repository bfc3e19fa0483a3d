#!/usr/bin/env python3
"""
Motor mínimo de tensores densos com diferenciação reversa

Tudo em float64. Ativações são matrizes [canais x comprimento]; kernels de
convolução são [saída x entrada x k]. Cada operação executada é registrada num
Tape (o registro de computação) e o backward percorre o registro na ordem
inversa exata da execução.
"""

import math
from collections import OrderedDict
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import InvalidArgumentError, StateError

# Menor probabilidade aceita dentro do log (evita log(0) quando o softmax satura)
PROB_FLOOR = 1e-300


class Tensor:
    """Valor universal do motor: dados float64 e slot opcional de gradiente"""

    __slots__ = ('data', 'grad', 'name')

    def __init__(self, data, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"tensor {self.name} não é escalar: {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(name={self.name}, shape={self.shape})"


class ParamStore:
    """Parâmetros nomeados com momentos do Adam e contador de passos por parâmetro"""

    def __init__(self):
        self.params: 'OrderedDict[str, Tensor]' = OrderedDict()
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.steps: Dict[str, int] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise InvalidArgumentError(f"parâmetro duplicado: {name}")
        tensor = Tensor(data, name=name)
        self.params[name] = tensor
        self.m[name] = np.zeros_like(tensor.data)
        self.v[name] = np.zeros_like(tensor.data)
        self.steps[name] = 0
        return tensor

    def glorot(self, name: str, shape: Tuple[int, ...], fan_in: int, fan_out: int,
               rng: np.random.Generator) -> Tensor:
        """Uniforme em [-s, s], s = sqrt(6 / (fan_in + fan_out))"""
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> List[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def count(self) -> int:
        """Número total de escalares treináveis"""
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def accumulate(self, grads: Dict[str, np.ndarray], weight: float = 1.0):
        """Soma gradientes por nome (ponto único de merge entre janelas)"""
        for name, grad in grads.items():
            tensor = self.params[name]
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += weight * grad


class Node:
    """Entrada do registro: saída, entradas e regra de backward"""

    __slots__ = ('op', 'name', 'output', 'inputs', 'backward', 'signature')

    def __init__(self, op: str, name: Optional[str], output: Tensor, inputs: Sequence[Tensor],
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]], signature=None):
        self.op = op
        self.name = name
        self.output = output
        self.inputs = tuple(inputs)
        self.backward = backward
        # padrão de ativação (máscara ReLU / argmax do pooling), usado pelo gradcheck
        self.signature = signature


class Tape:
    """
    Registro de computação (ComputationRecord)

    Cada método executa a operação, registra o nó e devolve o tensor de saída.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], backward, name=None,
                signature=None) -> Tensor:
        tensor = Tensor(out, name=name or op)
        self.nodes.append(Node(op, name, tensor, inputs, backward, signature))
        return tensor

    # ------------------------------------------------------------------ camadas

    def conv1d(self, x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1, padding: int = 0,
               name: Optional[str] = None) -> Tensor:
        out = conv1d_forward(x.data, w.data, None if b is None else b.data, stride, padding)
        x_data, w_data = x.data, w.data

        def backward(g):
            gx, gw = conv1d_backward(g, x_data, w_data, stride, padding)
            return (gx, gw) if b is None else (gx, gw, g.sum(axis=1))

        inputs = (x, w) if b is None else (x, w, b)
        return self._record('conv1d', out, inputs, backward, name)

    def deconv1d(self, x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
                 b: Optional[Tensor] = None, name: Optional[str] = None) -> Tensor:
        out = deconv1d_forward(x.data, w.data, stride, padding)
        if b is not None:
            out = out + b.data[:, None]
        x_data, w_data = x.data, w.data

        def backward(g):
            gx, gw = deconv1d_backward(g, x_data, w_data, stride, padding)
            return (gx, gw) if b is None else (gx, gw, g.sum(axis=1))

        inputs = (x, w) if b is None else (x, w, b)
        return self._record('deconv1d', out, inputs, backward, name)

    def maxpool1d(self, x: Tensor, k: int, stride: int, name: Optional[str] = None) -> Tensor:
        out, argmax = maxpool1d_forward(x.data, k, stride)
        shape = x.data.shape

        def backward(g):
            return (maxpool1d_backward(g, argmax, shape, stride),)

        return self._record('maxpool1d', out, (x,), backward, name, signature=argmax)

    def relu(self, x: Tensor, name: Optional[str] = None) -> Tensor:
        mask = x.data > 0
        out = np.where(mask, x.data, 0.0)

        def backward(g):
            return (relu_backward(g, mask),)

        return self._record('relu', out, (x,), backward, name, signature=mask)

    def sigmoid(self, x: Tensor, name: Optional[str] = None) -> Tensor:
        out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

        def backward(g):
            return (g * out * (1.0 - out),)

        return self._record('sigmoid', out, (x,), backward, name)

    def softmax(self, x: Tensor, name: Optional[str] = None) -> Tensor:
        """Softmax por linha (cada linha é um vetor de scores C+1)"""
        out = softmax_rows(x.data)

        def backward(g):
            return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

        return self._record('softmax', out, (x,), backward, name)

    # ------------------------------------------------------------ aritmética

    def weighted_sum(self, a: Tensor, b: Tensor, rho: float, name: Optional[str] = None) -> Tensor:
        """S(a, b) = rho * a + (1 - rho) * b"""
        if a.shape != b.shape:
            raise InvalidArgumentError(f"weighted_sum: formas diferentes {a.shape} vs {b.shape}")
        if rho == 1.0:
            out = a.data.copy()
        elif rho == 0.0:
            out = b.data.copy()
        else:
            out = rho * a.data + (1.0 - rho) * b.data

        def backward(g):
            return rho * g, (1.0 - rho) * g

        return self._record('weighted_sum', out, (a, b), backward, name)

    def add(self, a: Tensor, b: Tensor, name: Optional[str] = None) -> Tensor:
        if a.shape != b.shape:
            raise InvalidArgumentError(f"add: formas diferentes {a.shape} vs {b.shape}")

        def backward(g):
            return g, g

        return self._record('add', a.data + b.data, (a, b), backward, name)

    def affine(self, x: Tensor, scale, shift=0.0, name: Optional[str] = None) -> Tensor:
        """scale * x + shift com constantes (escalares ou arrays da mesma forma)"""
        scale = np.asarray(scale, dtype=np.float64)

        def backward(g):
            return (g * scale,)

        return self._record('affine', scale * x.data + shift, (x,), backward, name)

    def exp(self, x: Tensor, name: Optional[str] = None) -> Tensor:
        out = np.exp(x.data)

        def backward(g):
            return (g * out,)

        return self._record('exp', out, (x,), backward, name)

    def square(self, x: Tensor, name: Optional[str] = None) -> Tensor:
        data = x.data

        def backward(g):
            return (2.0 * data * g,)

        return self._record('square', data * data, (x,), backward, name)

    def smooth_l1(self, x: Tensor, name: Optional[str] = None) -> Tensor:
        data = x.data
        small = np.abs(data) < 1.0
        out = np.where(small, 0.5 * data * data, np.abs(data) - 0.5)

        def backward(g):
            return (g * np.where(small, data, np.sign(data)),)

        return self._record('smooth_l1', out, (x,), backward, name)

    def mean(self, x: Tensor, name: Optional[str] = None) -> Tensor:
        n = x.data.size
        shape = x.data.shape

        def backward(g):
            return (np.full(shape, g.reshape(-1)[0] / n),)

        return self._record('mean', np.full((1, 1), x.data.mean()), (x,), backward, name)

    def sum(self, x: Tensor, name: Optional[str] = None) -> Tensor:
        shape = x.data.shape

        def backward(g):
            return (np.full(shape, g.reshape(-1)[0]),)

        return self._record('sum', np.full((1, 1), x.data.sum()), (x,), backward, name)

    def linear_combination(self, terms: Sequence[Tuple[float, Tensor]],
                           name: Optional[str] = None) -> Tensor:
        """Soma de escalares com coeficientes constantes"""
        total = np.zeros((1, 1))
        for coef, t in terms:
            total = total + coef * t.data.reshape(1, 1)
        coefs = [c for c, _ in terms]

        def backward(g):
            return tuple(c * g for c in coefs)

        return self._record('linear_combination', total, [t for _, t in terms], backward, name)

    # --------------------------------------------------------- reorganização

    def to_anchor_rows(self, x: Tensor, num_ratios: int, name: Optional[str] = None) -> Tensor:
        """
        [R*K x L] -> [L*R x K]: canal r*K + k da célula i vira linha i*R + r, coluna k
        """
        channels, length = x.data.shape
        if channels % num_ratios:
            raise InvalidArgumentError(f"{channels} canais não divisíveis por {num_ratios} razões")
        k = channels // num_ratios
        out = x.data.reshape(num_ratios, k, length).transpose(2, 0, 1).reshape(length * num_ratios, k)

        def backward(g):
            return (g.reshape(length, num_ratios, k).transpose(1, 2, 0).reshape(channels, length),)

        return self._record('to_anchor_rows', out, (x,), backward, name)

    def concat_rows(self, xs: Sequence[Tensor], name: Optional[str] = None) -> Tensor:
        sizes = [t.data.shape[0] for t in xs]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(xs)))

        return self._record('concat_rows', np.concatenate([t.data for t in xs], axis=0), xs, backward, name)

    def columns(self, x: Tensor, start: int, stop: int, name: Optional[str] = None) -> Tensor:
        shape = x.data.shape

        def backward(g):
            full = np.zeros(shape)
            full[:, start:stop] = g
            return (full,)

        return self._record('columns', x.data[:, start:stop].copy(), (x,), backward, name)

    def gather_rows(self, x: Tensor, index: np.ndarray, name: Optional[str] = None) -> Tensor:
        index = np.asarray(index, dtype=np.int64)
        shape = x.data.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return self._record('gather_rows', x.data[index].copy(), (x,), backward, name)

    def pick_log(self, probs: Tensor, rows: np.ndarray, cols: np.ndarray,
                 name: Optional[str] = None) -> Tensor:
        """-log(probs[rows, cols]) como coluna [n x 1]"""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        picked = np.maximum(probs.data[rows, cols], PROB_FLOOR)
        shape = probs.data.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, (rows, cols), -g.reshape(-1) / picked)
            return (full,)

        return self._record('pick_log', -np.log(picked).reshape(-1, 1), (probs,), backward, name)

    # ------------------------------------------------------------- backward

    def gradients(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Percorre o registro em ordem inversa e acumula gradientes por tensor

        Returns:
            Dicionário id(tensor) -> gradiente
        """
        if not self.nodes:
            raise StateError("backward chamado antes de qualquer forward")
        if loss.data.size != 1:
            raise InvalidArgumentError(f"perda deve ser escalar, recebido {loss.shape}")
        if not any(node.output is loss for node in self.nodes):
            raise StateError(f"perda {loss.name} não foi produzida por este registro")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for tensor, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads

    def signature(self) -> List[np.ndarray]:
        """Padrões de ativação de todos os nós não suaves (ReLU, pooling)"""
        return [node.signature for node in self.nodes if node.signature is not None]

    def first_non_finite(self) -> Optional[str]:
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node.name or node.op
        return None


def backward(loss: Tensor, record: Tape, params: ParamStore,
             names: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
    """
    Gradientes da perda em relação aos parâmetros nomeados

    Devolve um dicionário nome -> gradiente (zeros para parâmetros fora do grafo)
    sem escrever no ParamStore; o merge é feito por ParamStore.accumulate.
    """
    grads = record.gradients(loss)
    result = {}
    for name in (names if names is not None else params.names()):
        tensor = params[name]
        g = grads.get(id(tensor))
        result[name] = np.zeros_like(tensor.data) if g is None else g
    return result


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8):
    """Passo Adam com correção de viés; limpa os gradientes ao final"""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise StateError(f"gradiente ausente para {missing[0]}")

    for name, tensor in params.items():
        g = tensor.grad
        params.steps[name] += 1
        t = params.steps[name]
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + epsilon)
        tensor.grad = None


# ---------------------------------------------------------------------------
# Núcleos numéricos (forward e backward puros sobre ndarrays)
# ---------------------------------------------------------------------------

def conv_output_length(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def deconv_output_length(length: int, k: int, stride: int, padding: int) -> int:
    return (length - 1) * stride - 2 * padding + k


def _check_conv(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int, padding: int):
    if x.ndim != 2:
        raise InvalidArgumentError(f"conv1d: entrada deve ser [canais x comprimento], recebido {x.shape}")
    if w.ndim != 3:
        raise InvalidArgumentError(f"conv1d: kernel deve ser [saída x entrada x k], recebido {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise InvalidArgumentError(f"conv1d: in_ch do kernel {w.shape[1]} != canais da entrada {x.shape[0]}")
    if w.shape[2] < 1:
        raise InvalidArgumentError("conv1d: k deve ser >= 1")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError(f"conv1d: stride {stride} / padding {padding} inválidos")
    if b is not None and b.shape != (w.shape[0],):
        raise InvalidArgumentError(f"conv1d: bias {b.shape} não corresponde a out_ch {w.shape[0]}")
    if x.shape[1] + 2 * padding < w.shape[2]:
        raise InvalidArgumentError(f"conv1d: comprimento {x.shape[1]} menor que o kernel {w.shape[2]}")


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int,
                   padding: int) -> np.ndarray:
    """Correlação cruzada com padding de zeros"""
    _check_conv(x, w, b, stride, padding)
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (padding, padding)))
    cols = sliding_window_view(xp, k, axis=1)[:, ::stride, :]
    out = np.einsum('oik,itk->ot', w, cols)
    if b is not None:
        out = out + b[:, None]
    return out


def conv1d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int,
                    padding: int) -> Tuple[np.ndarray, np.ndarray]:
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (padding, padding)))
    cols = sliding_window_view(xp, k, axis=1)[:, ::stride, :]
    out_len = g.shape[1]
    gw = np.einsum('ot,itk->oik', g, cols)
    gcols = np.einsum('ot,oik->itk', g, w)
    gxp = np.zeros_like(xp)
    for j in range(k):
        gxp[:, j:j + stride * (out_len - 1) + 1:stride] += gcols[:, :, j]
    return gxp[:, padding:padding + x.shape[1]], gw


def deconv1d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """
    Convolução transposta: adjunta exata de conv1d com o mesmo kernel

    O kernel tem a forma do conv1d correspondente, [entrada_deconv x saída_deconv x k].
    """
    if x.ndim != 2 or w.ndim != 3 or x.shape[0] != w.shape[0]:
        raise InvalidArgumentError(f"deconv1d: formas incompatíveis {x.shape} e {w.shape}")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError(f"deconv1d: stride {stride} / padding {padding} inválidos")
    length = x.shape[1]
    k = w.shape[2]
    out_len = deconv_output_length(length, k, stride, padding)
    if out_len < 1:
        raise InvalidArgumentError(f"deconv1d: comprimento de saída {out_len} inválido")
    full = np.zeros((w.shape[1], (length - 1) * stride + k))
    contrib = np.einsum('iok,it->otk', w, x)
    for j in range(k):
        full[:, j:j + stride * (length - 1) + 1:stride] += contrib[:, :, j]
    return full[:, padding:padding + out_len]


def deconv1d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int,
                      padding: int) -> Tuple[np.ndarray, np.ndarray]:
    length = x.shape[1]
    k = w.shape[2]
    full = np.zeros((w.shape[1], (length - 1) * stride + k))
    full[:, padding:padding + g.shape[1]] = g
    gcontrib = np.stack([full[:, j:j + stride * (length - 1) + 1:stride] for j in range(k)], axis=2)
    gx = np.einsum('iok,otk->it', w, gcontrib)
    gw = np.einsum('it,otk->iok', x, gcontrib)
    return gx, gw


def maxpool1d_forward(x: np.ndarray, k: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    if k < 1 or stride < 1:
        raise InvalidArgumentError(f"maxpool1d: k {k} / stride {stride} inválidos")
    if k > x.shape[1]:
        raise InvalidArgumentError(f"maxpool1d: janela {k} maior que o comprimento {x.shape[1]}")
    windows = sliding_window_view(x, k, axis=1)[:, ::stride, :]
    # np.argmax devolve o primeiro máximo em empates
    argmax = np.argmax(windows, axis=2)
    out = np.take_along_axis(windows, argmax[:, :, None], axis=2)[:, :, 0]
    return out.copy(), argmax


def maxpool1d_backward(g: np.ndarray, argmax: np.ndarray, shape: Tuple[int, int],
                       stride: int) -> np.ndarray:
    gx = np.zeros(shape)
    channels, out_len = argmax.shape
    rows = np.repeat(np.arange(channels), out_len)
    positions = (np.arange(out_len)[None, :] * stride + argmax).reshape(-1)
    np.add.at(gx, (rows, positions), g.reshape(-1))
    return gx


def relu_backward(g: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # subgradiente 0 em x == 0
    return np.where(mask, g, 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(scores) -> np.ndarray:
    """Softmax de um vetor de scores (C+1 entradas)"""
    return softmax_rows(np.asarray(scores, dtype=np.float64))


def all_finite(params: ParamStore) -> Optional[str]:
    """Nome do primeiro parâmetro (ou gradiente) não finito, se houver"""
    for name, tensor in params.items():
        if not np.all(np.isfinite(tensor.data)):
            return name
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            return f"{name}.grad"
    return None


