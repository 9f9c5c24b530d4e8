#!/usr/bin/python
# -*- coding: utf-8 -*-
"""
autodiff.py

Motor mínimo de diferenciación en modo reverso sobre arreglos de numpy.

Cada `Tensor` es a la vez el nodo del grafo: guarda el tipo de operación que
lo produjo, sus nodos de entrada, la salida cacheada (`data`) y el acumulador
de gradiente (`grad`). El grafo se construye ejecutando las operaciones
(define-by-run) y se consume con `backward`.

Convenciones:
- Imágenes en formato (N, C, H, W), fila mayor.
- Precisión global: 32 bits en ejecución, 64 bits para chequeos de gradiente.
- Subgradiente de ReLU en 0 es 0; el muestreador bilineal usa la derivada de
  la celda izquierda en coordenadas enteras.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

GROUP_NAMES: Tuple[str, ...] = ("depth_encoder", "depth_decoder", "pose_encoder", "pose_decoder")

_PRECISIONES = {32: np.float32, 64: np.float64}
_dtype = np.float32

# Tolerancia para ajustar coordenadas casi enteras en el muestreador.
_SNAP = {np.float32: 1e-4, np.float64: 1e-9}

_MAX_ADAM_STEP = 2**31 - 1


class ShapeError(ValueError):
    """Formas incompatibles entre operandos o pérdida no escalar."""


class NonFiniteError(ArithmeticError):
    """Una operación produjo NaN o Inf."""


class GraphConsumedError(RuntimeError):
    """Se pidió backward sobre un grafo ya consumido."""


def set_precision(bits: int) -> None:
    """Fija la precisión global del motor (32 o 64 bits)."""
    global _dtype
    if bits not in _PRECISIONES:
        raise ValueError("bits debe ser 32 o 64.")
    _dtype = _PRECISIONES[bits]


def get_dtype() -> type:
    return _dtype


@contextmanager
def precision(bits: int) -> Iterator[None]:
    """Cambia temporalmente la precisión global."""
    anterior = 64 if _dtype is np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(anterior)


class Tensor:
    """Arreglo denso con historial para diferenciación en modo reverso."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward", "_op", "_consumed")
    # Los operadores de numpy ceden ante Tensor (ndarray + Tensor -> Tensor.__radd__).
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _prev: Tuple["Tensor", ...] = (),
        _op: str = "",
    ) -> None:
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._prev = _prev
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        etiqueta = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op or 'hoja'!r}{etiqueta})"

    def __add__(self, other: ArrayLike | "Tensor") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike | "Tensor") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike | "Tensor") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike | "Tensor") -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: ArrayLike | Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"La operación '{op}' produjo valores no finitos.")


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    _check_finite(data, op)
    requiere = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requiere, _prev=tuple(parents) if requiere else (), _op=op)
    if requiere:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce un gradiente difundido a la forma original del operando."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"'{op}': formas incompatibles {a.shape} y {b.shape}.") from exc


# ----------------------------------------------------------------------------
# Operaciones elementales
# ----------------------------------------------------------------------------

def add(a: ArrayLike | Tensor, b: ArrayLike | Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", _bw)


def sub(a: ArrayLike | Tensor, b: ArrayLike | Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", _bw)


def mul(a: ArrayLike | Tensor, b: ArrayLike | Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", _bw)


def div(a: ArrayLike | Tensor, b: ArrayLike | Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def _bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), "div", _bw)


def relu(x: Tensor) -> Tensor:
    mascara = x.data > 0

    def _bw(g):
        return (g * mascara,)

    return _node(x.data * mascara, (x,), "relu", _bw)


def elu(x: Tensor) -> Tensor:
    positivo = x.data > 0
    negativo = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(positivo, x.data, negativo)

    def _bw(g):
        return (g * np.where(positivo, 1.0, negativo + 1.0),)

    return _node(out, (x,), "elu", _bw)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), "sigmoid", _bw)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def _bw(g):
        return (g * out,)

    return _node(out, (x,), "exp", _bw)


def tabs(x: Tensor) -> Tensor:
    signo = np.sign(x.data)

    def _bw(g):
        return (g * signo,)

    return _node(np.abs(x.data), (x,), "abs", _bw)


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def _bw(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _node(out, (x,), "sqrt", _bw)


def sin(x: Tensor) -> Tensor:
    def _bw(g):
        return (g * np.cos(x.data),)

    return _node(np.sin(x.data), (x,), "sin", _bw)


def cos(x: Tensor) -> Tensor:
    def _bw(g):
        return (-g * np.sin(x.data),)

    return _node(np.cos(x.data), (x,), "cos", _bw)


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Recorta valores; el gradiente es cero donde se recortó."""
    out = np.clip(x.data, lo, hi)
    dentro = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        dentro &= x.data >= lo
    if hi is not None:
        dentro &= x.data <= hi

    def _bw(g):
        return (g * dentro,)

    return _node(out, (x,), "clamp", _bw)


# ----------------------------------------------------------------------------
# Reducciones y manipulación de forma
# ----------------------------------------------------------------------------

def _normalizar_ejes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ejes = _normalizar_ejes(axis, x.ndim)
    out = x.data.sum(axis=ejes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, ejes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), "sum", _bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ejes = _normalizar_ejes(axis, x.ndim)
    cuenta = int(np.prod([x.shape[a] for a in ejes])) if ejes else 1
    out = x.data.mean(axis=ejes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, ejes)
        return (np.broadcast_to(g / cuenta, x.shape).copy(),)

    return _node(out, (x,), "mean", _bw)


def min_axis(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Mínimo a lo largo de un eje; en empates gana el primer índice."""
    axis = axis % x.ndim
    idx = np.argmin(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_k, g, axis=axis)
        return (gx,)

    return _node(out, (x,), "min", _bw)


def concat(tensors: Sequence[Tensor | np.ndarray], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat requiere al menos un tensor.")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: formas incompatibles {[t.shape for t in tensors]}.") from exc
    cortes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, cortes, axis=axis))

    return _node(out, tensors, "concat", _bw)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: no se puede pasar de {x.shape} a {shape}.") from exc

    def _bw(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), "reshape", _bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inversa = np.argsort(axes)

    def _bw(g):
        return (np.transpose(g, inversa),)

    return _node(np.transpose(x.data, axes), (x,), "transpose", _bw)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], copy=True)
    claves = idx if isinstance(idx, tuple) else (idx,)
    avanzado = any(isinstance(k, (np.ndarray, list)) for k in claves)

    def _bw(g):
        gx = np.zeros_like(x.data)
        if avanzado:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return _node(out, (x,), "getitem", _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: formas incompatibles {a.shape} @ {b.shape}.")

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), "matmul", _bw)


# ----------------------------------------------------------------------------
# Operaciones de imagen
# ----------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolución 2D (correlación cruzada) con relleno de ceros.

    Args:
        x: Entrada (N, C, H, W).
        weight: Pesos (O, C, kh, kw).
        bias: Sesgo opcional (O,).
        stride: Paso 1 o 2.
        padding: Relleno de ceros por lado.

    Returns:
        Tensor (N, O, Ho, Wo).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d espera entrada (N, C, H, W) y pesos (O, C, kh, kw).")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: la entrada tiene {c} canales y los pesos esperan {cw}.")
    if stride not in (1, 2):
        raise ShapeError("conv2d solo admite stride 1 o 2.")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: la entrada {x.shape} es demasiado pequeña para el kernel.")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(xp, wd))

    def _ventana(i: int, j: int):
        return (
            slice(None),
            slice(None),
            slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride),
        )

    for i in range(kh):
        for j in range(kw):
            parche = xp[_ventana(i, j)]
            out += np.tensordot(parche, wd[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def _bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                ventana = _ventana(i, j)
                gw[:, :, i, j] = np.tensordot(g, xp[ventana], axes=([0, 2, 3], [0, 2, 3]))
                gxp[ventana] += np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    padres = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, padres, "conv2d", _bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), "upsample", _bw)


def avg_pool3x3(x: Tensor) -> Tensor:
    """Promedio 3x3 con paso 1 y sin relleno: (H, W) -> (H-2, W-2)."""
    n, c, h, w = x.shape
    if h < 3 or w < 3:
        raise ShapeError("avg_pool3x3 requiere H, W >= 3.")
    ho, wo = h - 2, w - 2
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            out += x.data[:, :, i:i + ho, j:j + wo]
    out /= 9.0

    def _bw(g):
        gx = np.zeros_like(x.data)
        g9 = g / 9.0
        for i in range(3):
            for j in range(3):
                gx[:, :, i:i + ho, j:j + wo] += g9
        return (gx,)

    return _node(out, (x,), "avg_pool3x3", _bw)


def reflection_pad(x: Tensor, pad: int = 1) -> Tensor:
    n, c, h, w = x.shape
    if h <= pad or w <= pad:
        raise ShapeError("reflection_pad requiere H, W mayores que el relleno.")
    idx_h = np.pad(np.arange(h), pad, mode="reflect")
    idx_w = np.pad(np.arange(w), pad, mode="reflect")
    out = x.data[:, :, idx_h][:, :, :, idx_w]

    def _bw(g):
        parcial = np.zeros((n, c, h, g.shape[3]), dtype=g.dtype)
        np.add.at(parcial, (slice(None), slice(None), idx_h), g)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), slice(None), idx_w), parcial)
        return (gx,)

    return _node(out, (x,), "reflection_pad", _bw)


def _celda(coord: np.ndarray, extent: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coordenada en píxeles -> (índice izquierdo, peso, máscara de interior)."""
    dentro = (coord >= 0) & (coord <= extent - 1)
    c = np.clip(coord, 0, extent - 1)
    tol = _SNAP[_dtype]
    redondo = np.round(c)
    c = np.where(np.abs(c - redondo) < tol, redondo, c)
    i0 = np.clip(np.ceil(c) - 1, 0, extent - 2).astype(np.intp)
    return i0, c - i0, dentro


def grid_sample(image: Tensor, grid: Tensor) -> Tensor:
    """Muestreo bilineal con coordenadas normalizadas en [-1, 1].

    Las coordenadas fuera del rango se recortan al borde (clamp-to-edge); ahí
    el gradiente respecto a la grilla es cero.

    Args:
        image: (N, C, H, W).
        grid: (N, 2, Ho, Wo) con (x, y) normalizados; 0 -> -1 y W-1 -> +1.

    Returns:
        Tensor (N, C, Ho, Wo).
    """
    if image.ndim != 4 or grid.ndim != 4 or grid.shape[1] != 2 or grid.shape[0] != image.shape[0]:
        raise ShapeError(f"grid_sample: formas incompatibles {image.shape} y {grid.shape}.")
    n, c, h, w = image.shape
    if h < 2 or w < 2:
        raise ShapeError("grid_sample requiere H, W >= 2.")

    u = (grid.data[:, 0] + 1.0) * 0.5 * (w - 1)
    v = (grid.data[:, 1] + 1.0) * 0.5 * (h - 1)
    x0, a, dentro_u = _celda(u, w)
    y0, b, dentro_v = _celda(v, h)
    x1, y1 = x0 + 1, y0 + 1
    lote = np.arange(n)[:, None, None]

    img = image.data
    ia = img[lote, :, y0, x0]
    ib = img[lote, :, y0, x1]
    ic = img[lote, :, y1, x0]
    id_ = img[lote, :, y1, x1]
    a_, b_ = a[..., None], b[..., None]
    wa = (1.0 - a_) * (1.0 - b_)
    wb = a_ * (1.0 - b_)
    wc = (1.0 - a_) * b_
    wd = a_ * b_
    out = (wa * ia + wb * ib + wc * ic + wd * id_).transpose(0, 3, 1, 2)

    def _bw(g):
        gt = g.transpose(0, 2, 3, 1)
        gimg = np.zeros_like(img)
        for yy, xx, peso in ((y0, x0, wa), (y0, x1, wb), (y1, x0, wc), (y1, x1, wd)):
            np.add.at(gimg, (lote, slice(None), yy, xx), gt * peso)
        d_a = (1.0 - b_) * (ib - ia) + b_ * (id_ - ic)
        d_b = (1.0 - a_) * (ic - ia) + a_ * (id_ - ib)
        gu = (gt * d_a).sum(axis=-1) * (0.5 * (w - 1)) * dentro_u
        gv = (gt * d_b).sum(axis=-1) * (0.5 * (h - 1)) * dentro_v
        return gimg, np.stack([gu, gv], axis=1)

    return _node(out, (image, grid), "grid_sample", _bw)


# ----------------------------------------------------------------------------
# Grafo, backward y parámetros
# ----------------------------------------------------------------------------

@dataclass
class ParameterGroup:
    """Pesos entrenables de una sub-red (depth/pose x encoder/decoder).

    Attributes:
        name: Uno de GROUP_NAMES.
        tensors: Mapa nombre -> Tensor. Los nombres son únicos por construcción.
        trainable: Si False, `sgd_step`/`adam_step` no lo modifican.
        norm_stats_frozen: Si True, las estadísticas de normalización no se actualizan.
    """

    name: str
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True
    norm_stats_frozen: bool = True

    def __post_init__(self) -> None:
        if self.name not in GROUP_NAMES:
            raise ValueError(f"Grupo desconocido '{self.name}'. Use uno de {GROUP_NAMES}.")

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def subset(self, names: Iterable[str]) -> "ParameterGroup":
        """Vista con los mismos objetos Tensor restringida a `names`."""
        return ParameterGroup(
            name=self.name,
            tensors={n: self.tensors[n] for n in names},
            trainable=self.trainable,
            norm_stats_frozen=self.norm_stats_frozen,
        )

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def restore(self, snapshot: Mapping[str, np.ndarray]) -> None:
        for n, arr in snapshot.items():
            self.tensors[n].data = arr.copy()

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag


class Graph:
    """Grafo dinámico: una función que construye nodos a partir de entradas nombradas."""

    def __init__(self, builder: Callable[..., Dict[str, Tensor]], input_names: Sequence[str]) -> None:
        self.builder = builder
        self.input_names = tuple(input_names)
        self.outputs: Dict[str, Tensor] = {}

    def forward(self, inputs: Mapping[str, ArrayLike | Tensor]) -> Dict[str, Tensor]:
        faltantes = [n for n in self.input_names if n not in inputs]
        if faltantes:
            raise ShapeError(f"Entradas del grafo sin enlazar: {faltantes}.")
        enlazadas = {n: inputs[n] for n in self.input_names}
        self.outputs = dict(self.builder(**enlazadas))
        return self.outputs


def forward(graph: Graph, inputs: Mapping[str, ArrayLike | Tensor]) -> Dict[str, Tensor]:
    return graph.forward(inputs)


def _orden_topologico(raiz: Tensor) -> List[Tensor]:
    orden: List[Tensor] = []
    visitados = set()
    pila: List[Tuple[Tensor, bool]] = [(raiz, False)]
    while pila:
        nodo, expandido = pila.pop()
        if expandido:
            orden.append(nodo)
            continue
        if id(nodo) in visitados:
            continue
        visitados.add(id(nodo))
        pila.append((nodo, True))
        for padre in nodo._prev:
            if id(padre) not in visitados:
                pila.append((padre, False))
    return orden


def gradients(loss: Tensor, tensors: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradientes de una pérdida escalar respecto a `tensors`; consume el grafo."""
    if loss.data.size != 1:
        raise ShapeError(f"La pérdida debe ser escalar; forma recibida {loss.shape}.")
    if loss._consumed:
        raise GraphConsumedError("El grafo ya fue consumido; ejecute forward de nuevo.")

    orden = _orden_topologico(loss)
    acumulado: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nodo in reversed(orden):
        if not nodo._prev:
            continue
        g = acumulado.pop(id(nodo), None)
        if g is None:
            continue
        for padre, gp in zip(nodo._prev, nodo._backward(g)):
            if gp is None or not padre.requires_grad:
                continue
            previo = acumulado.get(id(padre))
            acumulado[id(padre)] = gp if previo is None else previo + gp

    for nodo in orden:
        if nodo._prev:
            nodo._prev = ()
            nodo._backward = None
    loss._consumed = True

    resultado = []
    for t in tensors:
        g = acumulado.get(id(t))
        g = np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        resultado.append(g)
    return resultado


def backward(loss: Tensor, wrt: Iterable[ParameterGroup]) -> Dict[str, Dict[str, np.ndarray]]:
    """Propaga la pérdida y devuelve gradientes solo para los grupos en `wrt`.

    Returns:
        {nombre_grupo: {nombre_tensor: gradiente}}.
    """
    grupos = list(wrt)
    claves: List[Tuple[str, str]] = []
    tensores: List[Tensor] = []
    for grupo in grupos:
        for nombre, t in grupo.tensors.items():
            claves.append((grupo.name, nombre))
            tensores.append(t)
    grads = gradients(loss, tensores)
    resultado: Dict[str, Dict[str, np.ndarray]] = {g.name: {} for g in grupos}
    for (grupo, nombre), g in zip(claves, grads):
        resultado[grupo][nombre] = g
    return resultado


def sgd_step(params: ParameterGroup, grads: Mapping[str, np.ndarray], lr: float) -> ParameterGroup:
    """SGD simple: w <- w - lr * g para cada tensor del grupo.

    Raises:
        ValueError: Si lr es negativo o falta el gradiente de algún tensor.
    """
    if lr < 0:
        raise ValueError("lr no puede ser negativo.")
    faltantes = [n for n in params.tensors if n not in grads]
    if faltantes:
        raise ValueError(f"Faltan gradientes para {faltantes} en '{params.name}'.")
    if not params.trainable:
        return params
    for nombre, t in params.tensors.items():
        t.data = (t.data - lr * grads[nombre]).astype(t.data.dtype, copy=False)
    return params


@dataclass
class AdamState:
    """Momentos de Adam por tensor, inicializados en cero al primer uso."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParameterGroup,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[ParameterGroup, AdamState]:
    """Paso de Adam con corrección de sesgo."""
    if lr <= 0:
        raise ValueError("lr debe ser positivo.")
    if state.step >= _MAX_ADAM_STEP:
        raise OverflowError("El contador de pasos de Adam se desbordó.")
    faltantes = [n for n in params.tensors if n not in grads]
    if faltantes:
        raise ValueError(f"Faltan gradientes para {faltantes} en '{params.name}'.")
    if not params.trainable:
        return params, state

    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for nombre, t in params.tensors.items():
        g = grads[nombre]
        m = state.m.get(nombre, np.zeros_like(t.data))
        v = state.v.get(nombre, np.zeros_like(t.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[nombre], state.v[nombre] = m, v
        t.data = (t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.data.dtype, copy=False)
    return params, state


# ----------------------------------------------------------------------------
# Oráculo de diferencias finitas
# ----------------------------------------------------------------------------

def _elegir_indices(analitico: np.ndarray, coords: Optional[int], select: str, rng) -> List[Tuple[int, ...]]:
    todos = analitico.size
    if coords is None or coords >= todos:
        planos = np.arange(todos)
    elif select == "largest":
        planos = np.argsort(-np.abs(analitico).reshape(-1), kind="stable")[:coords]
    elif select == "random":
        planos = (rng or np.random.default_rng(0)).choice(todos, size=coords, replace=False)
    else:
        raise ValueError("select debe ser 'largest' o 'random'.")
    return [np.unravel_index(int(p), analitico.shape) for p in planos]


def _evaluar(fn: Callable[[], Tensor]) -> float:
    try:
        valor = float(fn().data)
    except NonFiniteError as exc:
        raise NonFiniteError("fn devolvió un valor no finito en el punto perturbado.") from exc
    if not np.isfinite(valor):
        raise NonFiniteError("fn devolvió un valor no finito en el punto perturbado.")
    return valor


def _error_relativo(a: float, cd: float, floor: float) -> float:
    return abs(a - cd) / max(abs(a), abs(cd), floor)


def check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    coords: Optional[int] = None,
    select: str = "largest",
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-12,
) -> float:
    """Compara gradientes analíticos con diferencias centrales perturbando `tensors` in situ.

    Debe llamarse dentro de `precision(64)` con tensores de 64 bits.

    Returns:
        Máximo error relativo |a - cd| / max(|a|, |cd|, floor).
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    analiticos = gradients(loss_fn(), tensors)
    peor = 0.0
    for t, analitico in zip(tensors, analiticos):
        for idx in _elegir_indices(analitico, coords, select, rng):
            original = t.data[idx].copy()
            t.data[idx] = original + eps
            mas = _evaluar(loss_fn)
            t.data[idx] = original - eps
            menos = _evaluar(loss_fn)
            t.data[idx] = original
            cd = (mas - menos) / (2.0 * eps)
            peor = max(peor, _error_relativo(float(analitico[idx]), cd, floor))
    return peor


def finite_difference_check(
    fn: Callable[[Tensor], Tensor],
    point: ArrayLike,
    eps: float = 1e-5,
    coords: Optional[int] = None,
    select: str = "largest",
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-12,
) -> float:
    """Máximo error relativo entre el gradiente analítico de `fn` y diferencias centrales.

    Args:
        fn: Función Tensor -> escalar.
        point: Punto de evaluación.
        eps: Paso de la diferencia central.
        coords: Número de coordenadas a verificar (None = todas).
        select: 'largest' (mayor |gradiente|) o 'random'.

    Returns:
        max |analítico - cd| / max(|analítico|, |cd|, floor).
    """
    with precision(64):
        x = Tensor(np.array(point, dtype=np.float64, copy=True))
        return check_tensors(lambda: fn(x), [x], eps=eps, coords=coords, select=select, rng=rng, floor=floor)
