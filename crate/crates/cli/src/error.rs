use std::fmt;

/// Failure of a subcommand, mapped to an exit code and a one-line report.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(motionlab::Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.category(),
        }
    }

    /// 2 usage or configuration, 3 I/O or file format, 4 numerical, 5 invalid input.
    pub fn exit_code(&self) -> u8 {
        use motionlab::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(
                E::Io { .. } | E::Version { .. } | E::Magic(_) | E::Truncated(_) | E::Checksum(_) | E::Format(_),
            ) => 3,
            CliError::Core(E::Numerical(_) | E::NonFiniteFrame { .. }) => 4,
            CliError::Core(E::Shape(_) | E::Invalid(_) | E::Incompatible(_)) => 5,
        }
    }

    /// `error[<category>]: <message>` on a single line.
    pub fn line(&self) -> String {
        let message = self.to_string().replace('\n', " ");
        format!("error[{}]: {message}", self.category())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<motionlab::Error> for CliError {
    fn from(e: motionlab::Error) -> Self {
        CliError::Core(e)
    }
}
