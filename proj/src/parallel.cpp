// SPDX-License-Identifier: Apache-2.0
#include "cpm/parallel.hpp"

namespace cpm {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace cpm
