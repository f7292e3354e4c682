#include "mqret/error.hpp"

namespace mqret {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::Data: return "data";
    case ErrorKind::Format: return "format";
    case ErrorKind::Retrieval: return "retrieval";
    case ErrorKind::Alignment: return "alignment";
    case ErrorKind::Training: return "training";
    case ErrorKind::Access: return "access";
    case ErrorKind::Staleness: return "staleness";
    case ErrorKind::Dependency: return "dependency";
    case ErrorKind::Reporting: return "reporting";
  }
  return "unknown";
}

}  // namespace mqret
