#include "eqsep/errors.hpp"

namespace eqsep {

void rethrow_with_context(const std::string& prefix) {
  try {
    throw;
  } catch (const DivergenceError& e) {
    throw DivergenceError(prefix + e.what(), e.epoch());
  }
#define EQSEP_RETHROW(T) \
  catch (const T& e) { throw T(prefix + e.what()); }
  EQSEP_RETHROW(DimensionError)
  EQSEP_RETHROW(FormatError)
  EQSEP_RETHROW(LengthError)
  EQSEP_RETHROW(LabelError)
  EQSEP_RETHROW(SamplingError)
  EQSEP_RETHROW(IndexError)
  EQSEP_RETHROW(ConfigError)
  EQSEP_RETHROW(IoError)
  EQSEP_RETHROW(IntegrityError)
  EQSEP_RETHROW(TransportError)
  EQSEP_RETHROW(DegenerateError)
  EQSEP_RETHROW(DomainError)
  EQSEP_RETHROW(InsufficientPointsError)
  EQSEP_RETHROW(SweepError)
  EQSEP_RETHROW(UserError)
  EQSEP_RETHROW(NumericalError)
  EQSEP_RETHROW(Error)
#undef EQSEP_RETHROW
}

}  // namespace eqsep
