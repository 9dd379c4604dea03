//! Minimal Well-Known Text reader/writer for the geometries the toolkit
//! consumes: `POINT` (sensor positions), `LINESTRING` (lane centerlines)
//! and `POLYGON` (geofences).
//!
//! Keywords are case-insensitive and whitespace is free-form, following the
//! OGC simple-features text grammar. Only two-dimensional coordinates are
//! accepted.

use crate::error::{Error, Result};
use crate::model::LocalPoint;

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Word(&'a str),
    Number(&'a str),
    Open,
    Close,
    Comma,
}

impl Token<'_> {
    fn text(&self) -> String {
        match self {
            Token::Word(s) | Token::Number(s) => (*s).to_string(),
            Token::Open => "(".into(),
            Token::Close => ")".into(),
            Token::Comma => ",".into(),
        }
    }
}

fn err(token: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Wkt {
        token: token.into(),
        reason: reason.into(),
    }
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'(' => {
                tokens.push(Token::Open);
                i += 1;
            }
            b')' => {
                tokens.push(Token::Close);
                i += 1;
            }
            b',' => {
                tokens.push(Token::Comma);
                i += 1;
            }
            _ => {
                let start = i;
                while i < bytes.len()
                    && !matches!(bytes[i], b' ' | b'\t' | b'\n' | b'\r' | b'(' | b')' | b',')
                {
                    i += 1;
                }
                let word = &text[start..i];
                if word.as_bytes()[0].is_ascii_alphabetic()
                    && word.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
                {
                    tokens.push(Token::Word(word));
                } else {
                    tokens.push(Token::Number(word));
                }
            }
        }
    }
    tokens
}

struct Cursor<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Option<Token<'a>> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.pos)
    }

    fn expect_open(&mut self) -> Result<()> {
        match self.next() {
            Some(Token::Open) => Ok(()),
            Some(t) => Err(err(t.text(), "expected `(`")),
            None => Err(err("<end>", "expected `(`")),
        }
    }

    fn expect_close(&mut self) -> Result<()> {
        match self.next() {
            Some(Token::Close) => Ok(()),
            Some(t) => Err(err(t.text(), "expected `)`")),
            None => Err(err("<end>", "expected `)`")),
        }
    }

    fn number(&mut self) -> Result<f64> {
        match self.next() {
            Some(Token::Number(s)) => {
                let v: f64 = s.parse().map_err(|_| err(s, "not a number"))?;
                if !v.is_finite() {
                    return Err(err(s, "coordinate must be finite"));
                }
                Ok(v)
            }
            Some(t) => Err(err(t.text(), "expected a numeric coordinate")),
            None => Err(err("<end>", "expected a numeric coordinate")),
        }
    }

    fn coordinate(&mut self) -> Result<LocalPoint> {
        let east = self.number()?;
        let north = self.number()?;
        if let Some(Token::Number(s)) = self.peek() {
            return Err(err(*s, "only two-dimensional coordinates are supported"));
        }
        Ok(LocalPoint::new(east, north))
    }

    fn keyword(&mut self, expected: &str) -> Result<()> {
        match self.next() {
            Some(Token::Word(w)) if w.eq_ignore_ascii_case(expected) => Ok(()),
            Some(Token::Word(w)) => Err(err(w, format!("expected {expected} geometry"))),
            Some(t) => Err(err(t.text(), "expected a geometry keyword")),
            None => Err(err("<end>", "empty WKT")),
        }
    }

    fn finish(&mut self) -> Result<()> {
        match self.next() {
            None => Ok(()),
            Some(t) => Err(err(t.text(), "trailing input")),
        }
    }
}

/// Parses `POINT (x y)`; `x` maps to east and `y` to north.
pub fn parse_wkt_point(text: &str) -> Result<LocalPoint> {
    let mut c = Cursor {
        tokens: tokenize(text),
        pos: 0,
    };
    c.keyword("POINT")?;
    c.expect_open()?;
    let p = c.coordinate()?;
    c.expect_close()?;
    c.finish()?;
    Ok(p)
}

/// Formats a point so that [`parse_wkt_point`] recovers it bit-exactly.
pub fn format_wkt_point(p: LocalPoint) -> String {
    format!("POINT ({} {})", p.east, p.north)
}

/// Parses `LINESTRING (x y, ...)` into its vertices, in order.
pub fn parse_wkt_linestring(text: &str) -> Result<Vec<LocalPoint>> {
    let mut c = Cursor {
        tokens: tokenize(text),
        pos: 0,
    };
    c.keyword("LINESTRING")?;
    c.expect_open()?;
    let mut line = vec![c.coordinate()?];
    loop {
        match c.next() {
            Some(Token::Comma) => line.push(c.coordinate()?),
            Some(Token::Close) => break,
            Some(t) => return Err(err(t.text(), "expected `,` or `)`")),
            None => return Err(err("<end>", "unterminated linestring")),
        }
    }
    c.finish()?;
    Ok(line)
}

/// Parses the exterior ring of `POLYGON ((x y, ...))`. The closing vertex is
/// dropped when it repeats the first one. Interior rings are rejected.
pub fn parse_wkt_polygon(text: &str) -> Result<Vec<LocalPoint>> {
    let mut c = Cursor {
        tokens: tokenize(text),
        pos: 0,
    };
    c.keyword("POLYGON")?;
    c.expect_open()?;
    c.expect_open()?;
    let mut ring = vec![c.coordinate()?];
    loop {
        match c.next() {
            Some(Token::Comma) => ring.push(c.coordinate()?),
            Some(Token::Close) => break,
            Some(t) => return Err(err(t.text(), "expected `,` or `)`")),
            None => return Err(err("<end>", "unterminated ring")),
        }
    }
    match c.peek() {
        Some(Token::Comma) => return Err(err(",", "interior rings are not supported")),
        _ => c.expect_close()?,
    }
    c.finish()?;
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    Ok(ring)
}
