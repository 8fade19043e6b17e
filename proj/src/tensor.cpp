#include "msgc/tensor.hpp"

namespace msgc {

const char* error_category(ErrorCode code) {
  switch (code) {
    case ErrorCode::config: return "config";
    case ErrorCode::io: return "io";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::crc_mismatch: return "crc_mismatch";
    case ErrorCode::label_range: return "label_range";
    case ErrorCode::checkpoint_mismatch: return "checkpoint_mismatch";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::usage: return "usage";
  }
  return "unknown";
}

int error_exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::config: return 2;
    case ErrorCode::io: return 3;
    case ErrorCode::bad_magic:
    case ErrorCode::truncated:
    case ErrorCode::crc_mismatch:
    case ErrorCode::label_range:
    case ErrorCode::checkpoint_mismatch: return 4;
    case ErrorCode::numeric: return 5;
    case ErrorCode::usage: return 2;
  }
  return 1;
}

}  // namespace msgc
