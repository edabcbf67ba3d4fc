//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PSYNCKPT" | version u32
//! mode u8 | max_terminals u32 | max_steps u32 | encode_len u32
//! vocab u32 | d u32 | H u32 | m u32 | A u32
//! vocabulary: count u32, then (len u32, utf-8 bytes) per token
//! fingerprint: len u32, utf-8 bytes
//! meta slots: count u32, then (len u32, utf-8 bytes) per slot
//! iteration u64
//! parameter count u64, then f64 values in group order
//! ```

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::game::{ActionMode, Game, GameConfig, Vocabulary};
use crate::grammar::Grammar;
use crate::metafeatures::META_SLOTS;
use crate::network::{ModelParams, ModelShape, NetworkError};

const MAGIC: &[u8; 8] = b"PSYNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("checkpoint contains invalid text")]
    Utf8,
    #[error("unknown action mode tag {0}")]
    Mode(u8),
    #[error("grammar fingerprint mismatch: checkpoint was built for {expected}, grammar is {found}")]
    Fingerprint { expected: String, found: String },
    #[error("meta-feature slots differ from this build: {0:?}")]
    MetaSlots(Vec<String>),
    #[error("vocabulary size {table} does not match declared size {declared}")]
    Vocabulary { table: usize, declared: usize },
    #[error("checkpoint action space {checkpoint} does not match the game's {game}")]
    Actions { checkpoint: usize, game: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocabulary: Vocabulary,
    pub fingerprint: String,
    pub meta_slots: Vec<String>,
    pub game: GameConfig,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn new(params: ModelParams, game: &Game, iteration: u64) -> Self {
        Checkpoint {
            params,
            vocabulary: game.vocabulary().clone(),
            fingerprint: game.grammar().fingerprint(),
            meta_slots: META_SLOTS.iter().map(|s| s.to_string()).collect(),
            game: *game.config(),
            iteration,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.params.shape();
        let mut out = Vec::with_capacity(128 + 8 * self.params.data().len());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(match self.game.mode {
            ActionMode::Grammar => 0,
            ActionMode::Edit => 1,
        });
        for v in [self.game.max_terminals, self.game.max_steps, self.game.encode_len] {
            put_u32(&mut out, v as u32);
        }
        for v in [shape.vocab, shape.embed, shape.hidden, shape.meta, shape.actions] {
            put_u32(&mut out, v as u32);
        }
        put_strings(&mut out, self.vocabulary.tokens());
        put_str(&mut out, &self.fingerprint);
        put_strings(&mut out, &self.meta_slots);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.data().len() as u64).to_le_bytes());
        for x in self.params.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mode = match r.u8()? {
            0 => ActionMode::Grammar,
            1 => ActionMode::Edit,
            t => return Err(CheckpointError::Mode(t)),
        };
        let game = GameConfig {
            mode,
            max_terminals: r.u32()? as usize,
            max_steps: r.u32()? as usize,
            encode_len: r.u32()? as usize,
        };
        let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
        let shape = ModelShape { vocab: dims[0], embed: dims[1], hidden: dims[2], meta: dims[3], actions: dims[4] };
        let tokens = r.strings()?;
        if tokens.len() != shape.vocab {
            return Err(CheckpointError::Vocabulary { table: tokens.len(), declared: shape.vocab });
        }
        let fingerprint = r.string()?;
        let meta_slots = r.strings()?;
        let iteration = r.u64()?;
        let n = r.u64()? as usize;
        if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(CheckpointError::Truncated);
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if r.remaining() != 0 {
            return Err(CheckpointError::Trailing(r.remaining()));
        }
        let params = ModelParams::from_data(shape, data)?;
        Ok(Checkpoint {
            params,
            vocabulary: Vocabulary::from_tokens(tokens),
            fingerprint,
            meta_slots,
            game,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Refuses grammars and meta-feature layouts the model was not built for.
    pub fn check_compatible(&self, grammar: &Grammar) -> Result<(), CheckpointError> {
        let found = grammar.fingerprint();
        if found != self.fingerprint {
            return Err(CheckpointError::Fingerprint { expected: self.fingerprint.clone(), found });
        }
        if self.meta_slots.iter().map(String::as_str).ne(META_SLOTS) {
            return Err(CheckpointError::MetaSlots(self.meta_slots.clone()));
        }
        Ok(())
    }

    /// Game over `grammar` using the checkpoint's vocabulary and game settings.
    pub fn game(&self, grammar: Arc<Grammar>) -> Result<Game, CheckpointError> {
        self.check_compatible(&grammar)?;
        let game = Game::with_vocabulary(grammar, self.game, self.vocabulary.clone());
        if game.action_space_size() != self.params.shape().actions {
            return Err(CheckpointError::Actions {
                checkpoint: self.params.shape().actions,
                game: game.action_space_size(),
            });
        }
        Ok(game)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_strings(out: &mut Vec<u8>, items: &[String]) {
    put_u32(out, items.len() as u32);
    for s in items {
        put_str(out, s);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8)
    }

    fn strings(&mut self) -> Result<Vec<String>, CheckpointError> {
        let n = self.u32()? as usize;
        // Each entry needs at least its 4-byte length.
        if n.saturating_mul(4) > self.remaining() {
            return Err(CheckpointError::Truncated);
        }
        (0..n).map(|_| self.string()).collect()
    }
}
