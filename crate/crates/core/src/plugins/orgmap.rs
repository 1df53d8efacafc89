//! Domain-suffix and address-block attribution to organizations.

use ipnet::Ipv4Net;
use std::net::Ipv4Addr;
use std::path::Path;
use thiserror::Error;

pub const UNKNOWN_ORG: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrgPattern {
    /// Stored without the leading dot; matches the name itself and any subdomain.
    Suffix(String),
    Net(Ipv4Net),
}

impl OrgPattern {
    pub fn parse(s: &str) -> Option<OrgPattern> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix('.') {
            return (!rest.is_empty()).then(|| OrgPattern::Suffix(rest.to_ascii_lowercase()));
        }
        if let Ok(net) = s.parse::<Ipv4Net>() {
            return Some(OrgPattern::Net(net));
        }
        if let Ok(ip) = s.parse::<Ipv4Addr>() {
            return Some(OrgPattern::Net(Ipv4Net::new(ip, 32).expect("/32")));
        }
        None
    }

    pub fn matches(&self, domain: Option<&str>, addr: Ipv4Addr) -> bool {
        match self {
            OrgPattern::Suffix(sfx) => domain.is_some_and(|d| domain_has_suffix(d, sfx)),
            OrgPattern::Net(n) => n.contains(&addr),
        }
    }
}

/// `d` equals `sfx` or ends with `.sfx`.
pub fn domain_has_suffix(d: &str, sfx: &str) -> bool {
    d.len() >= sfx.len()
        && d[d.len() - sfx.len()..].eq_ignore_ascii_case(sfx)
        && (d.len() == sfx.len() || d.as_bytes()[d.len() - sfx.len() - 1] == b'.')
}

#[derive(Debug, Error)]
pub enum OrgMapError {
    #[error("org map line {line}: {reason}")]
    BadLine { line: u64, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered rules; the first match wins.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OrgMap {
    rules: Vec<(OrgPattern, String)>,
}

impl OrgMap {
    pub fn new(rules: Vec<(OrgPattern, String)>) -> Self {
        OrgMap { rules }
    }

    /// Reads `pattern,organization` rows. A `pattern,organization` header
    /// row and `#` comment lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self, OrgMapError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rules = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 2 {
                return Err(OrgMapError::BadLine { line, reason: format!("expected 2 fields, got {}", rec.len()) });
            }
            if rules.is_empty() && &rec[0] == "pattern" && &rec[1] == "organization" {
                continue;
            }
            let pat = OrgPattern::parse(&rec[0]).ok_or_else(|| OrgMapError::BadLine {
                line,
                reason: format!("`{}` is neither a .suffix nor an address block", &rec[0]),
            })?;
            if rec[1].is_empty() {
                return Err(OrgMapError::BadLine { line, reason: "empty organization".into() });
            }
            rules.push((pat, rec[1].to_string()));
        }
        Ok(OrgMap { rules })
    }

    pub fn load(path: &Path) -> Result<Self, OrgMapError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn lookup(&self, domain: Option<&str>, addr: Ipv4Addr) -> &str {
        let domain = domain.filter(|d| !d.is_empty());
        self.rules
            .iter()
            .find(|(p, _)| p.matches(domain, addr))
            .map_or(UNKNOWN_ORG, |(_, o)| o.as_str())
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}
