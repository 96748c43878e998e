use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A vocabulary item as reported by a backend.
///
/// Hosted APIs differ in what they expose: some give only the token string,
/// others also an integer id. Ordering is `(id, text)` with `None` ids first,
/// so it is total and agrees with the derived equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(untagged)]
pub enum Token {
    Text(String),
    WithId { text: String, id: u32 },
}

// Hand-written so traces parse without serde's untagged buffering.
impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct TokenVisitor;

        impl<'de> serde::de::Visitor<'de> for TokenVisitor {
            type Value = Token;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a token string or {\"text\", \"id\"} object")
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Token, E> {
                Ok(Token::Text(v.to_owned()))
            }

            fn visit_string<E: serde::de::Error>(self, v: String) -> Result<Token, E> {
                Ok(Token::Text(v))
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(self, mut map: A) -> Result<Token, A::Error> {
                use serde::de::Error;
                let (mut text, mut id) = (None, None);
                #[derive(Deserialize)]
                #[serde(field_identifier, rename_all = "lowercase")]
                enum Field {
                    Text,
                    Id,
                    #[serde(other)]
                    Other,
                }
                while let Some(key) = map.next_key::<Field>()? {
                    match key {
                        Field::Text if text.is_none() => text = Some(map.next_value::<String>()?),
                        Field::Id if id.is_none() => id = Some(map.next_value::<u32>()?),
                        Field::Text => return Err(A::Error::duplicate_field("text")),
                        Field::Id => return Err(A::Error::duplicate_field("id")),
                        Field::Other => {
                            map.next_value::<serde::de::IgnoredAny>()?;
                        }
                    }
                }
                let text = text.ok_or_else(|| A::Error::missing_field("text"))?;
                Ok(match id {
                    Some(id) => Token::WithId { text, id },
                    None => Token::Text(text),
                })
            }
        }

        d.deserialize_any(TokenVisitor)
    }
}

impl Token {
    pub fn text(s: impl Into<String>) -> Self {
        Token::Text(s.into())
    }

    pub fn with_id(s: impl Into<String>, id: u32) -> Self {
        Token::WithId { text: s.into(), id }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Token::Text(t) | Token::WithId { text: t, .. } => t,
        }
    }

    pub fn id(&self) -> Option<u32> {
        match self {
            Token::Text(_) => None,
            Token::WithId { id, .. } => Some(*id),
        }
    }

    /// Identity under a given matching mode.
    pub fn key(&self, mode: KeyMode) -> TokenKey<'_> {
        match (mode, self.id()) {
            (KeyMode::Id, Some(id)) => TokenKey::Id(id),
            _ => TokenKey::Text(self.as_str()),
        }
    }
}

impl Ord for Token {
    fn cmp(&self, other: &Self) -> Ordering {
        self.id()
            .cmp(&other.id())
            .then_with(|| self.as_str().cmp(other.as_str()))
    }
}

impl PartialOrd for Token {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Text(t) => write!(f, "{t:?}"),
            Token::WithId { text, id } => write!(f, "{text:?}#{id}"),
        }
    }
}

/// How two tokens are compared: by integer id when every token involved
/// carries one, otherwise by string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    Id,
    Text,
}

impl KeyMode {
    pub fn for_tokens<'a>(tokens: impl IntoIterator<Item = &'a Token>) -> Self {
        if tokens.into_iter().all(|t| t.id().is_some()) {
            KeyMode::Id
        } else {
            KeyMode::Text
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKey<'a> {
    Id(u32),
    Text(&'a str),
}

/// Compares two token sequences under the mixed id/string identity rule.
pub fn same_tokens(a: &[Token], b: &[Token]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).all(|(x, y)| match (x.id(), y.id()) {
        (Some(i), Some(j)) => i == j,
        _ => x.as_str() == y.as_str(),
    })
}
