"""Matrix Market exchange files: matrices and vectors, real or complex.

Coordinate files load as CSR, array files as dense ndarrays.  Vectors are
stored as n-by-1 array files.  Writes carry enough digits for doubles to
round-trip exactly.
"""

import numpy as np
import scipy.io
import scipy.sparse as sp

_PRECISION = 17


def write_matrix(path, matrix) -> None:
    if sp.issparse(matrix):
        scipy.io.mmwrite(str(path), matrix.tocoo(), precision=_PRECISION)
    else:
        scipy.io.mmwrite(str(path), np.asarray(matrix), precision=_PRECISION)


def read_matrix(path):
    """Dense ndarray for array files, CSR for coordinate files."""
    loaded = scipy.io.mmread(str(path))
    if sp.issparse(loaded):
        return loaded.tocsr()
    return np.asarray(loaded)


def write_vector(path, vector) -> None:
    column = np.asarray(vector).reshape(-1, 1)
    scipy.io.mmwrite(str(path), column, precision=_PRECISION)


def read_vector(path):
    loaded = scipy.io.mmread(str(path))
    if sp.issparse(loaded):
        loaded = loaded.toarray()
    arr = np.asarray(loaded)
    if arr.ndim != 2 or 1 not in arr.shape:
        raise ValueError(f"{path} does not hold a single vector")
    return arr.ravel()
