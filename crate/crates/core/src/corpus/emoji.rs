use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

const BUILTIN_TSV: &str = include_str!("../../data/emoji_shortcodes.tsv");

#[derive(Debug, Error)]
pub enum EmojiTableError {
    #[error("emoji table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading emoji table: {0}")]
    Io(#[from] std::io::Error),
}

/// Maps single emoji codepoints to ASCII shortcodes (without the colons).
#[derive(Debug, Clone, Default)]
pub struct EmojiTable {
    codes: HashMap<char, String>,
}

impl EmojiTable {
    /// The table shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_tsv(BUILTIN_TSV).expect("builtin emoji table is well-formed")
    }

    pub fn load(path: &Path) -> Result<Self, EmojiTableError> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }

    /// Parses `codepoint-hex \t shortcode` lines. Shortcodes are lowercased and
    /// restricted to `[a-z0-9_+-]` so that cleaning stays idempotent.
    pub fn from_tsv(tsv: &str) -> Result<Self, EmojiTableError> {
        let mut codes = HashMap::new();
        for (i, line) in tsv.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| EmojiTableError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (hex, code) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
            let cp = u32::from_str_radix(hex.trim().trim_start_matches("U+"), 16)
                .map_err(|_| err("bad codepoint"))?;
            let ch = char::from_u32(cp).ok_or_else(|| err("not a scalar value"))?;
            let code = sanitize(code.trim().trim_matches(':'));
            if code.is_empty() {
                return Err(err("empty shortcode"));
            }
            codes.insert(ch, code);
        }
        Ok(EmojiTable { codes })
    }

    pub fn get(&self, ch: char) -> Option<&str> {
        self.codes.get(&ch).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.codes.keys().copied()
    }
}

fn sanitize(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    for c in code.chars().flat_map(char::to_lowercase) {
        let c = if c.is_ascii_alphanumeric() || matches!(c, '_' | '+' | '-') {
            c
        } else {
            '_'
        };
        if !(c == '_' && out.ends_with('_')) {
            out.push(c);
        }
    }
    out.trim_matches('_').to_string()
}

/// Codepoint ranges treated as emoji. Anything here that is not in the table
/// gets deleted during cleaning.
pub fn in_emoji_range(ch: char) -> bool {
    matches!(
        u32::from(ch),
        0x1F000..=0x1FAFF
            | 0x2300..=0x23FF
            | 0x2600..=0x27BF
            | 0x2B00..=0x2BFF
            | 0xFE00..=0xFE0F
            | 0x20E3
            | 0xE0000..=0xE007F
    )
}
