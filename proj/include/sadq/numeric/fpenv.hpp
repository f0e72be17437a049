// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#define SADQ_HAS_MXCSR 1
#endif

namespace sadq {

/// Flushes subnormal results and inputs to zero for the guard's lifetime.
/// Gradients of saturated softmaxes otherwise spend most of a backward pass in
/// microcode-assisted subnormal arithmetic.
class FlushSubnormalsGuard {
 public:
  FlushSubnormalsGuard() {
#ifdef SADQ_HAS_MXCSR
    previous_ = _mm_getcsr();
    _mm_setcsr(previous_ | kFlushToZero | kDenormalsAreZero);
#endif
  }
  ~FlushSubnormalsGuard() {
#ifdef SADQ_HAS_MXCSR
    _mm_setcsr(previous_);
#endif
  }
  FlushSubnormalsGuard(const FlushSubnormalsGuard&) = delete;
  FlushSubnormalsGuard& operator=(const FlushSubnormalsGuard&) = delete;

 private:
#ifdef SADQ_HAS_MXCSR
  static constexpr unsigned kFlushToZero = 0x8000;
  static constexpr unsigned kDenormalsAreZero = 0x0040;
  unsigned previous_ = 0;
#endif
};

}  // namespace sadq
