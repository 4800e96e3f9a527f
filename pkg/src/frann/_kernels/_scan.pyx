# cython: language_level=3
"""Hot scan kernels over nibble-transposed 4-bit code blocks.

Accumulation is float32 left-to-right over subspaces so results are
bit-identical to the numpy fallback, which uses the same order.
"""


def scan_codes_f32(const unsigned char[:, :, ::1] blocks,
                   Py_ssize_t count,
                   const float[:, ::1] lut,
                   float[::1] out):
    """Score `count` codes against a float32 LUT; writes into `out`."""
    cdef Py_ssize_t i, j, block, lane
    cdef Py_ssize_t m = lut.shape[0]
    cdef int nib
    cdef float acc
    for i in range(count):
        block = i >> 5
        lane = i & 31
        acc = 0.0
        for j in range(m):
            nib = (blocks[block, j, lane >> 1] >> (4 * (lane & 1))) & 0xF
            acc += lut[j, nib]
        out[i] = acc


def scan_codes_q8(const unsigned char[:, :, ::1] blocks,
                  Py_ssize_t count,
                  const unsigned char[:, ::1] lut,
                  float scale,
                  float bias,
                  float[::1] out):
    """Score codes against an 8-bit quantized LUT.

    Integer accumulation is exact (max m*255 fits float32), then one
    multiply-add maps back to the float score scale.
    """
    cdef Py_ssize_t i, j, block, lane
    cdef Py_ssize_t m = lut.shape[0]
    cdef int nib
    cdef unsigned int acc
    for i in range(count):
        block = i >> 5
        lane = i & 31
        acc = 0
        for j in range(m):
            nib = (blocks[block, j, lane >> 1] >> (4 * (lane & 1))) & 0xF
            acc += lut[j, nib]
        out[i] = (<float> acc) * scale + bias
