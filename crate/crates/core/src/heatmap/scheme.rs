//! Boundary tables: which landmarks form each facial boundary.
//!
//! Text format, one boundary per line:
//!
//! ```text
//! # comment
//! 0: 0, 1, 2, 3
//! 1: 33, 34, 35 wrap
//! ```
//!
//! `wrap` closes the polyline back to its first landmark. A landmark maps to
//! the first boundary that lists it.

use crate::error::{Error, Result};
use crate::landmarks::Scheme;

/// Boundary count shared by every shipped scheme.
pub const BOUNDARY_COUNT: usize = 13;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chain {
    pub indices: Vec<usize>,
    pub wrap: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryScheme {
    pub landmark_count: usize,
    pub chains: Vec<Chain>,
    pub landmark_to_boundary: Vec<usize>,
}

fn line_fields(text: &str) -> impl Iterator<Item = (usize, &str, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        let (key, rest) = line.split_once(':').unwrap_or((line, ""));
        Some((i + 1, key.trim(), rest.trim()))
    })
}

pub(crate) fn parse_index_list(line: usize, rest: &str) -> Result<Vec<usize>> {
    rest.split(',')
        .map(|tok| {
            tok.trim().parse::<usize>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad landmark index `{}`", tok.trim()),
            })
        })
        .collect()
}

/// `key: a, b, c` lines as (line number, key, indices).
pub(crate) fn parse_keyed_lists(text: &str) -> Result<Vec<(usize, String, Vec<usize>)>> {
    line_fields(text)
        .map(|(line, key, rest)| {
            if rest.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: format!("`{key}` has no indices"),
                });
            }
            Ok((line, key.to_string(), parse_index_list(line, rest)?))
        })
        .collect()
}

impl BoundaryScheme {
    /// Parses a boundary table for `landmark_count` landmarks.
    pub fn parse(text: &str, landmark_count: usize) -> Result<Self> {
        let mut chains: Vec<Chain> = Vec::new();
        for (line, key, rest) in line_fields(text) {
            let idx: usize = key.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad boundary index `{key}`"),
            })?;
            if idx != chains.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected boundary {}, found {idx}", chains.len()),
                });
            }
            let (list, wrap) = match rest.strip_suffix("wrap") {
                Some(head) => (head.trim(), true),
                None => (rest, false),
            };
            let indices = parse_index_list(line, list)?;
            if let Some(&bad) = indices.iter().find(|&&i| i >= landmark_count) {
                return Err(Error::Parse {
                    line,
                    msg: format!("landmark {bad} out of range for {landmark_count} points"),
                });
            }
            chains.push(Chain { indices, wrap });
        }
        let mut landmark_to_boundary = vec![usize::MAX; landmark_count];
        for (t, chain) in chains.iter().enumerate() {
            for &i in &chain.indices {
                if landmark_to_boundary[i] == usize::MAX {
                    landmark_to_boundary[i] = t;
                }
            }
        }
        if let Some(orphan) = landmark_to_boundary.iter().position(|&t| t == usize::MAX) {
            return Err(Error::contract(format!(
                "landmark {orphan} belongs to no boundary"
            )));
        }
        Ok(Self {
            landmark_count,
            chains,
            landmark_to_boundary,
        })
    }

    /// Shipped table for a named scheme.
    pub fn builtin(scheme: Scheme) -> Result<Self> {
        let text = match scheme {
            Scheme::W68 => include_str!("../../data/boundaries/w68.txt"),
            Scheme::C29 => include_str!("../../data/boundaries/c29.txt"),
            Scheme::A19 => include_str!("../../data/boundaries/a19.txt"),
            Scheme::F98 => include_str!("../../data/boundaries/f98.txt"),
            Scheme::Custom(n) => {
                return Err(Error::config(format!(
                    "no boundary table ships for {n}-point sets; supply one"
                )));
            }
        };
        Self::parse(text, scheme.count())
    }

    pub fn boundary_count(&self) -> usize {
        self.chains.len()
    }

    pub fn boundary_of(&self, landmark: usize) -> Option<usize> {
        self.landmark_to_boundary.get(landmark).copied()
    }

    /// Landmark indices of boundary `t` in drawing order, with the first
    /// index repeated at the end for wrapped chains.
    pub fn polyline(&self, t: usize) -> Vec<usize> {
        let chain = &self.chains[t];
        let mut out = chain.indices.clone();
        if chain.wrap && out.len() > 1 {
            out.push(out[0]);
        }
        out
    }
}
