#pragma once

namespace s4nd {

/// Worker count used by the OpenMP kernels. Results never depend on it:
/// every output element and every reduction is owned by exactly one worker
/// and accumulated in a fixed order.
void set_thread_count(int threads);
int thread_count();

/// Reads S4ND_THREADS; returns 0 when unset or unparsable.
int thread_count_from_env();

}  // namespace s4nd
