//! Flat `key = value` text files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys may appear once. Errors carry the 1-based line they refer to.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl KvEntry {
    pub fn invalid(&self, message: impl Display) -> ConfigError {
        ConfigError::InvalidValue {
            line: self.line,
            key: self.key.clone(),
            message: message.to_string(),
        }
    }

    pub fn unknown(&self) -> ConfigError {
        ConfigError::UnknownKey {
            line: self.line,
            key: self.key.clone(),
        }
    }

    pub fn parse<T>(&self) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.value.parse().map_err(|e| self.invalid(e))
    }

    pub fn parse_bool(&self) -> Result<bool, ConfigError> {
        match self.value.as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => Err(self.invalid(format!("`{other}` is not a boolean"))),
        }
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn parse_list<T>(&self) -> Result<Vec<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        if self.value.trim().is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|item| item.trim().parse().map_err(|e| self.invalid(e)))
            .collect()
    }
}

pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>, ConfigError> {
    let mut entries: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: raw.trim().to_string(),
            });
        };
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(ConfigError::Syntax {
                line,
                text: raw.trim().to_string(),
            });
        }
        if entries.iter().any(|e| e.key == key) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        entries.push(KvEntry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let e =
            parse_kv("# header\n\nnodes = 4  # trailing\nwarmup = 0.5, 0.75\nlist =\n").unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].line, 3);
        assert_eq!(e[0].parse::<usize>().unwrap(), 4);
        assert_eq!(e[1].parse_list::<f64>().unwrap(), vec![0.5, 0.75]);
        assert!(e[2].parse_list::<f64>().unwrap().is_empty());
    }

    #[test]
    fn reports_line_numbers() {
        assert_eq!(
            parse_kv("a = 1\nno equals sign\n"),
            Err(ConfigError::Syntax {
                line: 2,
                text: "no equals sign".into()
            })
        );
        assert_eq!(
            parse_kv("a = 1\n\na = 2\n"),
            Err(ConfigError::DuplicateKey {
                line: 3,
                key: "a".into()
            })
        );
        let e = parse_kv("n = x\n").unwrap();
        let err = e[0].parse::<usize>().unwrap_err();
        assert!(err.to_string().starts_with("line 1: invalid value for `n`"));
    }
}
