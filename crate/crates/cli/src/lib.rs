//! Configuration, file formats and commands behind the `qbm` binary.

pub mod commands;
pub mod config;
pub mod io;

use config::ConfigError;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DENOISER: u8 = 4;

/// Maps an error to the process exit code: 2 for configuration problems,
/// 3 for I/O failures and 4 for denoiser or protocol failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<qbm_core::Error>() {
            return match e {
                qbm_core::Error::Denoiser(_)
                | qbm_core::Error::Protocol(_)
                | qbm_core::Error::NonFinite { .. } => EXIT_DENOISER,
                qbm_core::Error::Io(_) => EXIT_IO,
                _ => EXIT_CONFIG,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<image::ImageError>() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn exit_codes_follow_the_root_cause() {
        let io: anyhow::Error = std::io::Error::other("gone").into();
        assert_eq!(exit_code(&io.context("reading x")), EXIT_IO);
        let cfg: anyhow::Error = ConfigError("bad".into()).into();
        assert_eq!(exit_code(&cfg), EXIT_CONFIG);
        let den: anyhow::Error = qbm_core::Error::Protocol("short frame".into()).into();
        assert_eq!(exit_code(&den), EXIT_DENOISER);
        let shape = Err::<(), _>(qbm_core::Error::InvalidParameter("x".into()))
            .context("restoring")
            .unwrap_err();
        assert_eq!(exit_code(&shape), EXIT_CONFIG);
    }
}
