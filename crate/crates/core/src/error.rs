use u2kws_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum KwsError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("out-of-vocabulary word `{0}`")]
    Oov(String),
    #[error("empty keyword")]
    EmptyKeyword,
    #[error("unknown phone `{0}`")]
    UnknownPhone(String),
    #[error("phone id {id} outside inventory of {size}")]
    PhoneIdOutOfRange { id: usize, size: usize },
    #[error("audio too short: {got} samples, need at least {need}")]
    AudioTooShort { got: usize, need: usize },
    #[error("non-finite audio sample at index {0}")]
    NonFiniteSample(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("target of length {target} needs {need} frames, posteriorgram has {frames}")]
    TargetTooLong {
        target: usize,
        need: usize,
        frames: usize,
    },
    #[error("search window of {window} frames cannot hold {tokens} keyword tokens")]
    WindowTooShort { window: usize, tokens: usize },
    #[error("no negative keyword found after {0} attempts")]
    NegativeSampling(usize),
    #[error("transcript of {got} words is shorter than the minimum keyword length {need}")]
    TranscriptTooShort { got: usize, need: usize },
    #[error("segment {start}..={end} evicted from buffer (oldest frame {oldest})")]
    Evicted {
        start: usize,
        end: usize,
        oldest: usize,
    },
    #[error("stream already closed")]
    StreamClosed,
    #[error("at least one keyword is required")]
    NoKeywords,
    #[error("model has no {0}")]
    MissingModule(&'static str),
    #[error("keyword `{0}` has no positive samples")]
    NoPositives(String),
    #[error("non-finite loss at step {0}")]
    Diverged(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = KwsError> = std::result::Result<T, E>;
