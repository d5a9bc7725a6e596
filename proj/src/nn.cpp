#include "robomamba/nn.hpp"

namespace robomamba {

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::projector: return "projector";
    case ParamGroup::lm: return "lm";
    case ParamGroup::head: return "head";
  }
  return "unknown";
}

}  // namespace robomamba
