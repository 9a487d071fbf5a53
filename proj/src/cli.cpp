#include "s3m/types.hpp"
namespace s3m::cli {}
