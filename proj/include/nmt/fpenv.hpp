#pragma once

#if defined(__SSE__) || defined(__x86_64__)
#include <xmmintrin.h>
#define NMT_HAVE_MXCSR 1
#endif

namespace nmt {

// Flushes subnormal floats to zero while in scope. Softmax tails and their
// gradients underflow into the subnormal range constantly, and x86 handles
// those values in microcode at a large cost. Restores the previous mode.
class FlushDenormals {
 public:
  FlushDenormals() {
#ifdef NMT_HAVE_MXCSR
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040);  // FTZ | DAZ
#endif
  }
  ~FlushDenormals() {
#ifdef NMT_HAVE_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals &) = delete;
  FlushDenormals &operator=(const FlushDenormals &) = delete;

 private:
  unsigned saved_ = 0;
};

}  // namespace nmt
