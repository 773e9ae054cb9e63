#include "dynrecon/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <thread>

namespace dynrecon {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::NonPositiveDisparity: return "NonPositiveDisparity";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::AllZeroWeights: return "AllZeroWeights";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::InvalidIntrinsics: return "InvalidIntrinsics";
    case ErrorCode::MissingEdge: return "MissingEdge";
    case ErrorCode::NoConnectedEdges: return "NoConnectedEdges";
    case ErrorCode::SingularNormalEquations: return "SingularNormalEquations";
    case ErrorCode::MissingNeighbor: return "MissingNeighbor";
    case ErrorCode::EvenKernel: return "EvenKernel";
    case ErrorCode::OracleFailure: return "OracleFailure";
    case ErrorCode::NoValidSamples: return "NoValidSamples";
    case ErrorCode::ConstantMonoDepth: return "ConstantMonoDepth";
    case ErrorCode::InsufficientOverlap: return "InsufficientOverlap";
    case ErrorCode::NoVisibleTimestep: return "NoVisibleTimestep";
    case ErrorCode::MissingUpdate: return "MissingUpdate";
    case ErrorCode::BehindCamera: return "BehindCamera";
    case ErrorCode::StaleForwardState: return "StaleForwardState";
    case ErrorCode::NoStaticPixels: return "NoStaticPixels";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::MissingAnchor: return "MissingAnchor";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::InsufficientAssociations: return "InsufficientAssociations";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Config: return "Config";
  }
  return "Unknown";
}

std::size_t count_nonzero(const Mask& m) {
  return std::size_t(std::count_if(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v != 0; }));
}

int worker_count() {
  int n = int(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("DYNRECON_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, int)>& fn) {
  const int workers = int(std::min<std::size_t>(std::size_t(worker_count()), std::max<std::size_t>(n, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> failures(static_cast<std::size_t>(workers));
  pool.reserve(std::size_t(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = std::size_t(w); i < n; i += std::size_t(workers)) fn(i, w);
      } catch (...) {
        failures[std::size_t(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);
}

}  // namespace dynrecon
