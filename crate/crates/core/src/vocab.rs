//! Fixed prompt vocabulary and tokenizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
#[repr(u8)]
pub enum Token {
    Null = 0,
    Identifier,
    Plushie,
    Cup,
    Pot,
    Triangular,
    Striped,
    Tall,
    Grass,
    Snow,
    Night,
    Ball,
    Pens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Reserved,
    Class,
    Modifier,
    Context,
}

/// Words dropped by the tokenizer: articles and the context prepositions.
const STOPWORDS: [&str; 7] = ["a", "an", "the", "on", "in", "at", "with"];

impl Token {
    pub const ALL: [Token; 13] = [
        Token::Null,
        Token::Identifier,
        Token::Plushie,
        Token::Cup,
        Token::Pot,
        Token::Triangular,
        Token::Striped,
        Token::Tall,
        Token::Grass,
        Token::Snow,
        Token::Night,
        Token::Ball,
        Token::Pens,
    ];

    /// Every token an image detector exists for, in attribute-vector order.
    pub const ATTRIBUTES: [Token; 11] = [
        Token::Plushie,
        Token::Cup,
        Token::Pot,
        Token::Triangular,
        Token::Striped,
        Token::Tall,
        Token::Grass,
        Token::Snow,
        Token::Night,
        Token::Ball,
        Token::Pens,
    ];

    pub const CLASSES: [Token; 3] = [Token::Plushie, Token::Cup, Token::Pot];
    pub const MODIFIERS: [Token; 3] = [Token::Triangular, Token::Striped, Token::Tall];
    pub const CONTEXTS: [Token; 5] = [
        Token::Grass,
        Token::Snow,
        Token::Night,
        Token::Ball,
        Token::Pens,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Token::ALL.get(id).copied()
    }

    pub fn word(self) -> &'static str {
        match self {
            Token::Null => "[null]",
            Token::Identifier => "[*]",
            Token::Plushie => "plushie",
            Token::Cup => "cup",
            Token::Pot => "pot",
            Token::Triangular => "triangular",
            Token::Striped => "striped",
            Token::Tall => "tall",
            Token::Grass => "grass",
            Token::Snow => "snow",
            Token::Night => "night",
            Token::Ball => "ball",
            Token::Pens => "pens",
        }
    }

    pub fn from_word(word: &str) -> Option<Token> {
        Token::ALL.iter().copied().find(|t| t.word() == word)
    }

    pub fn kind(self) -> TokenKind {
        match self {
            Token::Null | Token::Identifier => TokenKind::Reserved,
            Token::Plushie | Token::Cup | Token::Pot => TokenKind::Class,
            Token::Triangular | Token::Striped | Token::Tall => TokenKind::Modifier,
            _ => TokenKind::Context,
        }
    }

    /// Position in the attribute vector, if this token has a detector.
    pub fn attribute_index(self) -> Option<usize> {
        Token::ATTRIBUTES.iter().position(|t| *t == self)
    }

    fn phrase(self) -> String {
        match self {
            Token::Grass => "on grass".into(),
            Token::Snow => "in snow".into(),
            Token::Night => "at night".into(),
            Token::Ball => "with ball".into(),
            Token::Pens => "with pens".into(),
            t => t.word().into(),
        }
    }
}

impl From<Token> for String {
    fn from(t: Token) -> String {
        t.word().to_string()
    }
}

impl TryFrom<String> for Token {
    type Error = Error;

    fn try_from(word: String) -> Result<Token> {
        Token::from_word(&word).ok_or(Error::UnknownToken(word))
    }
}

pub const VOCAB_SIZE: usize = Token::ALL.len();

/// A validated token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    tokens: Vec<Token>,
}

impl PromptTokens {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Prompt(
                "empty token sequence; use the null prompt".into(),
            ));
        }
        if tokens.contains(&Token::Null) && tokens.len() > 1 {
            return Err(Error::Prompt("null token must appear alone".into()));
        }
        if tokens.iter().filter(|t| **t == Token::Identifier).count() > 1 {
            return Err(Error::Prompt(
                "at most one identifier token per prompt".into(),
            ));
        }
        Ok(Self { tokens })
    }

    pub fn null() -> Self {
        Self {
            tokens: vec![Token::Null],
        }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn is_null(&self) -> bool {
        self.tokens == [Token::Null]
    }

    pub fn has_identifier(&self) -> bool {
        self.tokens.contains(&Token::Identifier)
    }

    /// Attribute tokens (everything except reserved ones), in prompt order.
    pub fn attributes(&self) -> impl Iterator<Item = Token> + '_ {
        self.tokens
            .iter()
            .copied()
            .filter(|t| t.kind() != TokenKind::Reserved)
    }

    pub fn without_identifier(&self) -> Result<Self> {
        let tokens: Vec<Token> = self
            .tokens
            .iter()
            .copied()
            .filter(|t| *t != Token::Identifier)
            .collect();
        if tokens.is_empty() {
            return Ok(Self::null());
        }
        Self::new(tokens)
    }

    pub fn text(&self) -> String {
        if self.is_null() {
            return String::new();
        }
        let words: Vec<String> = self.tokens.iter().map(|t| t.phrase()).collect();
        format!("a {}", words.join(" "))
    }
}

impl std::fmt::Display for PromptTokens {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_null() {
            f.write_str("[null]")
        } else {
            f.write_str(&self.text())
        }
    }
}

/// Lowercase, drop articles and context prepositions, map words to tokens.
/// The empty prompt is the null prompt.
pub fn tokenize(text: &str) -> Result<PromptTokens> {
    let mut tokens = Vec::new();
    for raw in text.split_whitespace() {
        let word = raw.to_lowercase();
        if STOPWORDS.contains(&word.as_str()) {
            continue;
        }
        match Token::from_word(&word) {
            Some(t) => tokens.push(t),
            None => return Err(Error::UnknownToken(raw.to_string())),
        }
    }
    if tokens.is_empty() {
        return Ok(PromptTokens::null());
    }
    PromptTokens::new(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_examples() {
        assert_eq!(
            tokenize("a [*] plushie").unwrap().tokens(),
            &[Token::Identifier, Token::Plushie]
        );
        assert_eq!(
            tokenize("a [*] triangular plushie").unwrap().tokens(),
            &[Token::Identifier, Token::Triangular, Token::Plushie]
        );
        assert!(tokenize("").unwrap().is_null());
        assert_eq!(
            tokenize("A [*] Plushie with pens").unwrap().tokens(),
            &[Token::Identifier, Token::Plushie, Token::Pens]
        );
    }

    #[test]
    fn unknown_word_is_named() {
        match tokenize("a plushie with crayons") {
            Err(Error::UnknownToken(w)) => assert_eq!(w, "crayons"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prompt_invariants() {
        assert!(tokenize("[*] [*] cup").is_err());
        assert!(tokenize("[null] cup").is_err());
        assert!(tokenize("[null]").unwrap().is_null());
    }

    #[test]
    fn text_round_trips() {
        for text in [
            "a [*] plushie with pens",
            "a triangular cup on grass",
            "a pot at night",
        ] {
            let p = tokenize(text).unwrap();
            assert_eq!(p.text(), text);
            assert_eq!(tokenize(&p.text()).unwrap(), p);
        }
    }

    #[test]
    fn ids_round_trip() {
        for t in Token::ALL {
            assert_eq!(Token::from_id(t.id()), Some(t));
        }
    }
}
