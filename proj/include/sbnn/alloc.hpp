#pragma once

#include <cstdlib>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sbnn {

/// Keeps large freed blocks in the heap instead of handing them back to the
/// OS, so per-step activation buffers are not faulted in again every step.
/// Process-wide; call once from main.
inline void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace sbnn
