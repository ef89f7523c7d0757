#include "tpnt/error.hpp"

namespace tpnt {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::InvalidShape: return "InvalidShape";
    case Errc::NonFinite: return "NonFinite";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::CacheRequired: return "CacheRequired";
    case Errc::MissingXRand: return "MissingXRand";
    case Errc::UnsupportedLayer: return "UnsupportedLayer";
    case Errc::InvalidScale: return "InvalidScale";
    case Errc::NotConnected: return "NotConnected";
    case Errc::CorruptModel: return "CorruptModel";
    case Errc::DegenerateStats: return "DegenerateStats";
    case Errc::InsufficientData: return "InsufficientData";
    case Errc::AlreadyExists: return "AlreadyExists";
    case Errc::AlreadyConnected: return "AlreadyConnected";
    case Errc::InvalidParams: return "InvalidParams";
    case Errc::ParseError: return "ParseError";
    case Errc::EmptyEval: return "EmptyEval";
    case Errc::ConfigError: return "ConfigError";
    case Errc::IoError: return "IoError";
    case Errc::FrozenModule: return "FrozenModule";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::WeakTeacher: return "WeakTeacher";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& what)
    : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace tpnt
