//! Report serialization and the mapping from errors to exit codes.

use serde_json::Value;

use seedpc::codec::CodecError;
use seedpc::diffusion::DiffusionError;
use seedpc::pipeline::PipelineError;
use seedpc::pointset::PlyError;
use seedpc::toydenoiser::ToyError;
use seedpc::tuning::TuningError;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_DECODE: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// JSON number, or the strings `"inf"`, `"-inf"` and `"nan"` for values JSON
/// cannot hold.
pub fn number(v: f64) -> Value {
    if v.is_finite() {
        Value::from(v)
    } else {
        Value::from(text(v))
    }
}

/// CSV rendering with the same sentinels as [`number`].
pub fn text(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn codec_code(e: &CodecError) -> u8 {
    match e {
        CodecError::InvalidArgument(_) => EXIT_OTHER,
        CodecError::UnsupportedStream(_) | CodecError::Decode { .. } => EXIT_DECODE,
    }
}

fn tuning_code(e: &TuningError) -> u8 {
    match e {
        TuningError::NonFinite { .. } | TuningError::DegenerateWeights { .. } => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

fn diffusion_code(e: &DiffusionError) -> u8 {
    match e {
        DiffusionError::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

/// Exit code of the first error in the chain with a known category.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PlyError>() {
            return match e {
                PlyError::Parse { .. } => EXIT_PARSE,
                PlyError::Io(_) => EXIT_OTHER,
            };
        }
        if let Some(e) = cause.downcast_ref::<CodecError>() {
            return codec_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Codec(c) => codec_code(c),
                PipelineError::Inconsistent(_) => EXIT_DECODE,
                PipelineError::Tuning(t) => tuning_code(t),
                PipelineError::Diffusion(d) => diffusion_code(d),
                _ => EXIT_OTHER,
            };
        }
        if let Some(e) = cause.downcast_ref::<ToyError>() {
            return match e {
                ToyError::Diverged { .. } => EXIT_NUMERIC,
                ToyError::Format(_) => EXIT_PARSE,
                _ => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}
