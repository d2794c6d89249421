//! Micro-markup grammar: tokens, tokenizer and parser.
//!
//! ```text
//! seq   := item*
//! item  := atom | atom ('^' | '_') group | '\frac' group group
//! group := '{' seq '}'
//! atom  := [a-z0-9] | '+' | '-' | '='
//! ```

use std::fmt;

use super::CorpusError;

pub const MAX_TOKENS: usize = 48;
pub const MAX_DEPTH: usize = 2;

/// One grammar token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Atom(char),
    Frac,
    LBrace,
    RBrace,
    Sup,
    Sub,
}

const ATOMS: &str = "abcdefghijklmnopqrstuvwxyz0123456789+-=";

/// Size of the closed vocabulary.
pub const VOCAB_SIZE: usize = 39 + 5;

impl Token {
    pub fn is_atom_char(c: char) -> bool {
        ATOMS.contains(c)
    }

    /// Dense id in `0..VOCAB_SIZE`.
    pub fn id(self) -> usize {
        match self {
            Token::Atom(c) => ATOMS.find(c).expect("atom token holds a grammar atom"),
            Token::Frac => 39,
            Token::LBrace => 40,
            Token::RBrace => 41,
            Token::Sup => 42,
            Token::Sub => 43,
        }
    }

    pub fn from_id(id: usize) -> Option<Token> {
        match id {
            0..=38 => ATOMS.chars().nth(id).map(Token::Atom),
            39 => Some(Token::Frac),
            40 => Some(Token::LBrace),
            41 => Some(Token::RBrace),
            42 => Some(Token::Sup),
            43 => Some(Token::Sub),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Atom(c) => write!(f, "{c}"),
            Token::Frac => f.write_str("\\frac"),
            Token::LBrace => f.write_str("{"),
            Token::RBrace => f.write_str("}"),
            Token::Sup => f.write_str("^"),
            Token::Sub => f.write_str("_"),
        }
    }
}

/// A token together with its byte offset in the source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Spanned {
    pub token: Token,
    pub offset: usize,
}

/// Layout tree of a parsed document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Glyph(char),
    Script { base: char, raised: bool, body: Vec<Node> },
    Frac { num: Vec<Node>, den: Vec<Node> },
}

fn parse_err(offset: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse { offset, message: message.into() }
}

/// Splits markup into tokens and validates brace balance and structure.
pub fn tokenize(text: &str) -> Result<Vec<Token>, CorpusError> {
    Ok(tokenize_spanned(text)?.into_iter().map(|s| s.token).collect())
}

/// Like [`tokenize`], keeping byte offsets.
pub fn tokenize_spanned(text: &str) -> Result<Vec<Spanned>, CorpusError> {
    let mut out = Vec::new();
    let mut open = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((offset, c)) = chars.next() {
        let token = match c {
            '{' => {
                open.push(offset);
                Token::LBrace
            }
            '}' => {
                if open.pop().is_none() {
                    return Err(parse_err(offset, "unmatched '}'"));
                }
                Token::RBrace
            }
            '^' => Token::Sup,
            '_' => Token::Sub,
            '\\' => {
                let mut name = String::new();
                while let Some(&(_, n)) = chars.peek() {
                    if !n.is_ascii_alphabetic() {
                        break;
                    }
                    name.push(n);
                    chars.next();
                }
                if name != "frac" {
                    return Err(parse_err(offset, format!("unknown command \\{name}")));
                }
                Token::Frac
            }
            c if Token::is_atom_char(c) => Token::Atom(c),
            other => return Err(parse_err(offset, format!("unexpected character {other:?}"))),
        };
        out.push(Spanned { token, offset });
    }
    if !open.is_empty() {
        return Err(parse_err(text.len(), "unclosed '{'"));
    }
    parse_spanned(&out, text.len())?;
    Ok(out)
}

/// Concatenates token spellings. Inverse of [`tokenize`] on valid input.
pub fn detokenize(tokens: &[Token]) -> String {
    tokens.iter().map(ToString::to_string).collect()
}

/// Parses a token sequence into a layout tree.
pub fn parse(tokens: &[Token]) -> Result<Vec<Node>, CorpusError> {
    // synthetic offsets: token index, for sequences without source text
    let spanned: Vec<Spanned> = tokens.iter().enumerate().map(|(i, &token)| Spanned { token, offset: i }).collect();
    parse_spanned(&spanned, tokens.len())
}

fn parse_spanned(tokens: &[Spanned], end: usize) -> Result<Vec<Node>, CorpusError> {
    let mut p = Parser { tokens, pos: 0, end };
    let nodes = p.seq()?;
    if let Some(s) = p.peek() {
        return Err(parse_err(s.offset, format!("unexpected {}", s.token)));
    }
    Ok(nodes)
}

struct Parser<'a> {
    tokens: &'a [Spanned],
    pos: usize,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<Spanned> {
        self.tokens.get(self.pos).copied()
    }

    fn offset(&self) -> usize {
        self.peek().map_or(self.end, |s| s.offset)
    }

    fn seq(&mut self) -> Result<Vec<Node>, CorpusError> {
        let mut nodes = Vec::new();
        while let Some(s) = self.peek() {
            match s.token {
                Token::RBrace => break,
                Token::Atom(c) => {
                    self.pos += 1;
                    match self.peek().map(|n| n.token) {
                        Some(Token::Sup) | Some(Token::Sub) => {
                            let raised = self.peek().map(|n| n.token) == Some(Token::Sup);
                            self.pos += 1;
                            let body = self.group()?;
                            nodes.push(Node::Script { base: c, raised, body });
                        }
                        _ => nodes.push(Node::Glyph(c)),
                    }
                }
                Token::Frac => {
                    self.pos += 1;
                    let num = self.group()?;
                    let den = self.group()?;
                    nodes.push(Node::Frac { num, den });
                }
                Token::Sup | Token::Sub => return Err(parse_err(s.offset, "script without a base atom")),
                Token::LBrace => return Err(parse_err(s.offset, "group without a command")),
            }
        }
        Ok(nodes)
    }

    fn group(&mut self) -> Result<Vec<Node>, CorpusError> {
        let at = self.offset();
        match self.peek() {
            Some(Spanned { token: Token::LBrace, .. }) => self.pos += 1,
            _ => return Err(parse_err(at, "expected '{'")),
        }
        let body = self.seq()?;
        match self.peek() {
            Some(Spanned { token: Token::RBrace, .. }) => self.pos += 1,
            _ => return Err(parse_err(self.offset(), "expected '}'")),
        }
        Ok(body)
    }
}

/// Maximum brace nesting depth of a token sequence.
pub fn depth(tokens: &[Token]) -> usize {
    let mut d = 0usize;
    let mut max = 0;
    for t in tokens {
        match t {
            Token::LBrace => {
                d += 1;
                max = max.max(d);
            }
            Token::RBrace => d = d.saturating_sub(1),
            _ => {}
        }
    }
    max
}
