//! Flat `key = value` text used by the config files.
//!
//! Blank lines and lines starting with `#` are skipped. Keys may appear once.

use std::collections::HashSet;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key}")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

pub fn parse(text: &str) -> Result<Vec<(String, String)>, KvError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if !seen.insert(k.to_string()) {
            return Err(KvError::Duplicate {
                line: i + 1,
                key: k.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses `value` for `key`, naming both on failure.
pub fn value<T>(key: &str, value: &str) -> Result<T, KvError>
where
    T: FromStr,
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| KvError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// Implements `set`, `to_kv` and `from_kv` for a config struct whose listed
/// fields all implement `FromStr + Display`.
///
/// With `; nested` the listed field is itself a config: keys not matched
/// here are forwarded to it and its lines are appended to `to_kv`.
macro_rules! kv_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        $crate::kv::kv_fields!(@impl $ty { $($field),* } |this, key, value| {
            let _ = (this, value);
            Err($crate::kv::KvError::UnknownKey(key.to_string()))
        } |_this| String::new());
    };
    ($ty:ty { $($field:ident),* $(,)? }; $nested:ident) => {
        $crate::kv::kv_fields!(@impl $ty { $($field),* } |this, key, value| {
            this.$nested.set(key, value)
        } |this| this.$nested.to_kv());
    };
    (@impl $ty:ty { $($field:ident),* } |$this:ident, $key:ident, $value:ident| $fallback:block |$this2:ident| $tail:expr) => {
        impl $ty {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), $crate::kv::KvError> {
                match key {
                    $(stringify!($field) => self.$field = $crate::kv::value(key, value)?,)*
                    _ => {
                        let $this = self;
                        let ($key, $value) = (key, value);
                        return $fallback;
                    }
                }
                Ok(())
            }

            /// One `key = value` line per field, in declaration order.
            pub fn to_kv(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", stringify!($field), self.$field));)*
                let $this2 = self;
                s.push_str(&$tail);
                s
            }

            /// Starts from the defaults and applies every line of `text`.
            pub fn from_kv(text: &str) -> Result<Self, $crate::kv::KvError> {
                let mut c = Self::default();
                for (k, v) in $crate::kv::parse(text)? {
                    c.set(&k, &v)?;
                }
                Ok(c)
            }
        }
    };
}
pub(crate) use kv_fields;
