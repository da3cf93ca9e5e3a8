#pragma once

#include <stdexcept>
#include <string>

namespace episeg {

// Error codes. input_* style codes map to CLI exit 2, numeric_* to exit 3.
enum class Errc {
    empty_raster,
    bad_tile_size,
    out_of_bounds,
    no_such_level,
    bad_label_value,
    missing_tile,
    bad_config,
    io_failure,
    singular_stain_matrix,
    dimension_mismatch,
    grid_too_small,
    diverged,
    non_finite_objective,
    non_finite_gradient,
    non_finite_loss,
    bad_input_size,
    indivisible_input,
    empty_region,
    empty_input,
    invalid_grade,
};

const char* errc_name(Errc c);

// True for failures of the numerics (solver divergence, non-finite values),
// as opposed to bad inputs or I/O problems.
bool errc_is_numeric(Errc c);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

    Errc code() const { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) {
    throw Error(code, what);
}

inline const char* errc_name(Errc c) {
    switch (c) {
        case Errc::empty_raster: return "EmptyRaster";
        case Errc::bad_tile_size: return "BadTileSize";
        case Errc::out_of_bounds: return "OutOfBounds";
        case Errc::no_such_level: return "NoSuchLevel";
        case Errc::bad_label_value: return "BadLabelValue";
        case Errc::missing_tile: return "MissingTile";
        case Errc::bad_config: return "BadConfig";
        case Errc::io_failure: return "IoFailure";
        case Errc::singular_stain_matrix: return "SingularStainMatrix";
        case Errc::dimension_mismatch: return "DimensionMismatch";
        case Errc::grid_too_small: return "GridTooSmall";
        case Errc::diverged: return "Diverged";
        case Errc::non_finite_objective: return "NonFiniteObjective";
        case Errc::non_finite_gradient: return "NonFiniteGradient";
        case Errc::non_finite_loss: return "NonFiniteLoss";
        case Errc::bad_input_size: return "BadInputSize";
        case Errc::indivisible_input: return "IndivisibleInput";
        case Errc::empty_region: return "EmptyRegion";
        case Errc::empty_input: return "EmptyInput";
        case Errc::invalid_grade: return "InvalidGrade";
    }
    return "UnknownError";
}

inline bool errc_is_numeric(Errc c) {
    switch (c) {
        case Errc::singular_stain_matrix:
        case Errc::diverged:
        case Errc::non_finite_objective:
        case Errc::non_finite_gradient:
        case Errc::non_finite_loss:
            return true;
        default:
            return false;
    }
}

}  // namespace episeg
