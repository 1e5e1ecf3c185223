//! The ablation-row grammar:
//!
//! ```text
//! [<int>d+] [(<int>,<int>,<int>,<int>)@] K<int> [+[<merge>]]
//! ```
//!
//! Omitted fields inherit from a base row; rows are rendered back as deltas
//! against that base, except the base itself, which is always written in full.

use std::fmt;

use puyun_core::grid::{GridSpec, VariableSet};
use puyun_core::model::{LkaMode, MergeMode, ModelConfig};

/// The seven ablation rows, in table order.
pub const TABLE: [&str; 7] = [
    "768d+(6,6,6,6)@K5+[resize]",
    "K7",
    "K9",
    "K11",
    "K9+[pixelshuffle+resize]",
    "(12,12,12,12)@K9+[pixelshuffle+resize]",
    "1536d+(12,12,12,12)@K9+[pixelshuffle+resize]",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSpec {
    pub embed_dim: usize,
    pub blocks: [usize; 4],
    pub kernel: usize,
    pub merge: MergeMode,
}

impl AblationSpec {
    /// The first table row, against which the others are deltas.
    pub const BASE: AblationSpec = AblationSpec {
        embed_dim: 768,
        blocks: [6, 6, 6, 6],
        kernel: 5,
        merge: MergeMode::Resize,
    };

    /// Shortest string that parses back to `self` against `base`.
    pub fn render(&self, base: &AblationSpec) -> String {
        let full = self == base;
        let mut s = String::new();
        if full || self.embed_dim != base.embed_dim {
            s += &format!("{}d+", self.embed_dim);
        }
        if full || self.blocks != base.blocks {
            let [a, b, c, d] = self.blocks;
            s += &format!("({a},{b},{c},{d})@");
        }
        s += &format!("K{}", self.kernel);
        if full || self.merge != base.merge {
            s += &format!("+[{}]", self.merge.label());
        }
        s
    }

    /// Divide width and depth (rounding up, at least 1) for desk-scale sweeps.
    pub fn scaled(&self, embed_divisor: usize, block_divisor: usize) -> AblationSpec {
        let div = |v: usize, d: usize| v.div_ceil(d.max(1)).max(1);
        AblationSpec {
            embed_dim: div(self.embed_dim, embed_divisor),
            blocks: self.blocks.map(|b| div(b, block_divisor)),
            ..*self
        }
    }

    pub fn model_config(
        &self,
        variables: VariableSet,
        grid: GridSpec,
        patch: usize,
        lka_mode: LkaMode,
        droppath_rate: f64,
    ) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            blocks: self.blocks,
            kernel: self.kernel,
            lka_mode,
            patch,
            merge: self.merge,
            droppath_rate,
            variables,
            grid,
        }
    }
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(&AblationSpec::BASE))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("cannot parse ablation spec {input:?} at position {position}: {message}")]
pub struct ParseError {
    pub input: String,
    /// Byte offset of the offending character.
    pub position: usize,
    pub message: String,
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            input: self.s.to_string(),
            position: self.pos,
            message: message.into(),
        })
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<(), ParseError> {
        if self.eat(token) {
            Ok(())
        } else {
            self.fail(format!("expected {token:?}"))
        }
    }

    /// A positive decimal integer without sign or leading zeros.
    fn int(&mut self) -> Result<usize, ParseError> {
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return self.fail("expected an integer");
        }
        let text = &self.rest()[..digits];
        if text.starts_with('0') {
            return self.fail("integers must be positive without leading zeros");
        }
        match text.parse() {
            Ok(v) => {
                self.pos += digits;
                Ok(v)
            }
            Err(_) => self.fail("integer out of range"),
        }
    }
}

pub fn parse_ablation(input: &str, base: &AblationSpec) -> Result<AblationSpec, ParseError> {
    let mut c = Cursor { s: input, pos: 0 };
    let mut spec = *base;

    // `<int>d+` and `(..)@` both start differently from `K`, so one
    // character of lookahead decides each optional prefix.
    if c.rest().starts_with(|ch: char| ch.is_ascii_digit()) {
        spec.embed_dim = c.int()?;
        c.expect("d+")?;
    }
    if c.eat("(") {
        for (i, b) in spec.blocks.iter_mut().enumerate() {
            if i > 0 {
                c.expect(",")?;
            }
            *b = c.int()?;
        }
        c.expect(")@")?;
    }
    c.expect("K")?;
    let kernel_at = c.pos;
    spec.kernel = c.int()?;
    if spec.kernel.is_multiple_of(2) {
        c.pos = kernel_at;
        return c.fail("kernel size must be odd");
    }
    if c.eat("+[") {
        let end = match c.rest().find(']') {
            Some(e) => e,
            None => return c.fail("unterminated merge strategy"),
        };
        let label = &c.rest()[..end];
        spec.merge = match MergeMode::from_label(label) {
            Some(m) => m,
            None => return c.fail(format!("unknown merge strategy {label:?}")),
        };
        c.pos += end + 1;
    }
    if !c.rest().is_empty() {
        return c.fail("unexpected trailing input");
    }
    Ok(spec)
}

/// Parse `;`-separated rows, each against [`AblationSpec::BASE`].
pub fn parse_list(list: &str) -> Result<Vec<AblationSpec>, ParseError> {
    list.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_ablation(s, &AblationSpec::BASE))
        .collect()
}
