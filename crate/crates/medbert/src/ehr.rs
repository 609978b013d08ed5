//! Domain model for structured EHR sequences: diagnosis codes, visits,
//! patients, the code vocabulary, and conversion to model inputs.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const RESERVED_TOKENS: [&str; 3] = ["[PAD]", "[MASK]", "[UNK]"];

/// One diagnosis code occurrence with its within-visit ordering metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisCode {
    pub code: String,
    #[serde(rename = "poa")]
    pub present_on_admission: bool,
    #[serde(rename = "captured")]
    pub captured_during_visit: bool,
    pub priority: u32,
}

impl DiagnosisCode {
    pub fn new(code: impl Into<String>, poa: bool, captured: bool, priority: u32) -> Self {
        DiagnosisCode {
            code: code.into(),
            present_on_admission: poa,
            captured_during_visit: captured,
            priority,
        }
    }
}

/// One clinical encounter: a list of diagnosis codes plus length of stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub codes: Vec<DiagnosisCode>,
    #[serde(default)]
    pub los_days: u32,
}

/// A patient's temporally ordered visit history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub outcome_label: Option<bool>,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn total_codes(&self) -> usize {
        self.visits.iter().map(|v| v.codes.len()).sum()
    }

    pub fn prolonged_los_label(&self) -> bool {
        derive_prolonged_los_label(self)
    }
}

/// Sort codes within a visit by (present-on-admission desc, captured desc,
/// priority asc), stable for ties. Returns a new visit.
pub fn order_codes_within_visit(visit: &Visit) -> Result<Visit> {
    if visit.codes.is_empty() {
        return Err(Error::EmptyVisit);
    }
    let mut codes = visit.codes.clone();
    codes.sort_by(|a, b| {
        b.present_on_admission
            .cmp(&a.present_on_admission)
            .then(b.captured_during_visit.cmp(&a.captured_during_visit))
            .then(a.priority.cmp(&b.priority))
    });
    Ok(Visit {
        codes,
        los_days: visit.los_days,
    })
}

/// True iff any visit exceeds a seven-day stay (strictly more than 7 days).
pub fn derive_prolonged_los_label(patient: &PatientRecord) -> bool {
    patient.visits.iter().any(|v| v.los_days > 7)
}

/// Bidirectional code <-> id mapping with reserved PAD/MASK/UNK entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Number of non-reserved code tokens.
    pub fn n_codes(&self) -> usize {
        self.size() - RESERVED_TOKENS.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Id for a code, falling back to UNK for unseen codes.
    pub fn encode(&self, token: &str) -> usize {
        self.id_of(token).unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{token}\t{id}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut id_to_token = Vec::new();
        let mut token_to_id = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: "expected token<TAB>id".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: format!("bad id `{id}`"),
            })?;
            if id != id_to_token.len() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    reason: format!("ids must be dense and ascending, got {id}"),
                });
            }
            token_to_id.insert(token.to_string(), id);
            id_to_token.push(token.to_string());
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}

/// Build a vocabulary over every distinct code in the cohort. Reserved
/// tokens take ids 0-2; codes follow in first-occurrence order over the
/// patient/visit/code traversal, so id assignment is deterministic.
pub fn build_vocabulary(cohort: &[PatientRecord]) -> Result<Vocabulary> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut token_to_id: HashMap<String, usize> = HashMap::new();
    let mut id_to_token: Vec<String> = Vec::new();
    for token in RESERVED_TOKENS {
        token_to_id.insert(token.to_string(), id_to_token.len());
        id_to_token.push(token.to_string());
    }
    for patient in cohort {
        for visit in &patient.visits {
            for code in &visit.codes {
                if !token_to_id.contains_key(&code.code) {
                    token_to_id.insert(code.code.clone(), id_to_token.len());
                    id_to_token.push(code.code.clone());
                }
            }
        }
    }
    Ok(Vocabulary {
        token_to_id,
        id_to_token,
    })
}

/// The tensorizable form of one patient: three parallel id streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub code_ids: Vec<usize>,
    /// 0-based position of each code within its visit.
    pub serialization_ids: Vec<usize>,
    /// 1-based visit index, non-decreasing; 0 is reserved for PAD.
    pub visit_ids: Vec<usize>,
    pub length: usize,
    pub prolonged_los_label: bool,
    pub outcome_label: Option<bool>,
}

impl ModelInput {
    /// Append PAD entries to all three streams. `length` keeps the true
    /// (unpadded) length.
    pub fn pad_to(&self, target: usize) -> ModelInput {
        let mut padded = self.clone();
        while padded.code_ids.len() < target {
            padded.code_ids.push(PAD_ID);
            padded.serialization_ids.push(PAD_ID);
            padded.visit_ids.push(PAD_ID);
        }
        padded
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncodeOptions {
    pub max_seq_len: usize,
    /// When set, serialization ids are all zero (the within-visit order
    /// signal is dropped).
    pub constant_serialization: bool,
}

/// Flatten a patient's visits into `ModelInput` streams.
///
/// Unknown codes map to UNK. If the patient exceeds `max_seq_len`, the
/// most recent codes are kept: whole visits are dropped from the oldest
/// end where possible, and visit ids are re-indexed to start at 1.
pub fn encode_patient(
    patient: &PatientRecord,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<ModelInput> {
    encode_patient_opts(
        patient,
        vocab,
        EncodeOptions {
            max_seq_len,
            constant_serialization: false,
        },
    )
}

pub fn encode_patient_opts(
    patient: &PatientRecord,
    vocab: &Vocabulary,
    opts: EncodeOptions,
) -> Result<ModelInput> {
    if patient.total_codes() == 0 {
        return Err(Error::EmptyPatient(patient.patient_id.clone()));
    }
    let max = opts.max_seq_len;

    // Keep the longest suffix of whole visits that fits.
    let mut first_visit = patient.visits.len();
    let mut total = 0usize;
    for (i, visit) in patient.visits.iter().enumerate().rev() {
        if total + visit.codes.len() > max {
            break;
        }
        total += visit.codes.len();
        first_visit = i;
    }

    let mut code_ids = Vec::new();
    let mut serialization_ids = Vec::new();
    let mut visit_ids = Vec::new();

    if first_visit == patient.visits.len() {
        // Even the newest visit alone exceeds max: keep its most recent codes.
        let visit = patient.visits.last().unwrap();
        let skip = visit.codes.len() - max;
        for (pos, code) in visit.codes[skip..].iter().enumerate() {
            code_ids.push(vocab.encode(&code.code));
            serialization_ids.push(if opts.constant_serialization { 0 } else { pos });
            visit_ids.push(1);
        }
    } else {
        for (new_visit_idx, visit) in patient.visits[first_visit..].iter().enumerate() {
            for (pos, code) in visit.codes.iter().enumerate() {
                code_ids.push(vocab.encode(&code.code));
                serialization_ids.push(if opts.constant_serialization { 0 } else { pos });
                visit_ids.push(new_visit_idx + 1);
            }
        }
    }

    let length = code_ids.len();
    debug_assert!(length <= max);
    Ok(ModelInput {
        code_ids,
        serialization_ids,
        visit_ids,
        length,
        prolonged_los_label: patient.prolonged_los_label(),
        outcome_label: patient.outcome_label,
    })
}

/// Recover the code-string sequence from an encoded input (UNK stays UNK).
pub fn decode_input(input: &ModelInput, vocab: &Vocabulary) -> Vec<String> {
    input.code_ids[..input.length]
        .iter()
        .map(|&id| vocab.token_of(id).unwrap_or("[UNK]").to_string())
        .collect()
}

/// Read a cohort from the one-patient-per-line JSON format.
pub fn read_cohort_jsonl(path: &Path) -> Result<Vec<PatientRecord>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut cohort = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let patient: PatientRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        cohort.push(patient);
    }
    Ok(cohort)
}

pub fn write_cohort_jsonl(cohort: &[PatientRecord], path: &Path) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut writer = std::io::BufWriter::new(file);
    for patient in cohort {
        serde_json::to_writer(&mut writer, patient).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(c: &str, poa: bool, cap: bool, prio: u32) -> DiagnosisCode {
        DiagnosisCode::new(c, poa, cap, prio)
    }

    fn patient(visits: Vec<Visit>) -> PatientRecord {
        PatientRecord {
            patient_id: "p0".into(),
            outcome_label: None,
            visits,
        }
    }

    fn simple_visit(codes: &[&str], los: u32) -> Visit {
        Visit {
            codes: codes.iter().map(|c| code(c, true, true, 1)).collect(),
            los_days: los,
        }
    }

    #[test]
    fn ordering_poa_first() {
        let v = Visit {
            codes: vec![code("a", false, true, 1), code("b", true, false, 9)],
            los_days: 0,
        };
        let sorted = order_codes_within_visit(&v).unwrap();
        assert_eq!(sorted.codes[0].code, "b");
        assert_eq!(sorted.codes[1].code, "a");
        // input untouched
        assert_eq!(v.codes[0].code, "a");
    }

    #[test]
    fn ordering_stable_for_ties() {
        let v = Visit {
            codes: vec![code("x", true, true, 3), code("y", true, true, 3)],
            los_days: 0,
        };
        let sorted = order_codes_within_visit(&v).unwrap();
        assert_eq!(sorted.codes[0].code, "x");
        assert_eq!(sorted.codes[1].code, "y");
    }

    #[test]
    fn ordering_priority_within_captured() {
        let v = Visit {
            codes: vec![
                code("a", true, true, 5),
                code("b", true, true, 2),
                code("c", true, false, 1),
            ],
            los_days: 0,
        };
        let sorted = order_codes_within_visit(&v).unwrap();
        let names: Vec<_> = sorted.codes.iter().map(|c| c.code.as_str()).collect();
        assert_eq!(names, ["b", "a", "c"]);
    }

    #[test]
    fn ordering_empty_visit_errors() {
        let v = Visit {
            codes: vec![],
            los_days: 0,
        };
        assert!(matches!(order_codes_within_visit(&v), Err(Error::EmptyVisit)));
    }

    /// Brute-force check of the comparator: on every visit of <= 4 codes
    /// over a small key grid, the sorted result must be the minimal
    /// arrangement under the stated lexicographic criteria, found by
    /// enumerating all permutations.
    #[test]
    fn ordering_matches_brute_force() {
        fn key(c: &DiagnosisCode) -> (u8, u8, u32) {
            (
                if c.present_on_admission { 0 } else { 1 },
                if c.captured_during_visit { 0 } else { 1 },
                c.priority,
            )
        }
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            fn go(remaining: &[usize], prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
                if remaining.is_empty() {
                    out.push(prefix.clone());
                    return;
                }
                for (i, &x) in remaining.iter().enumerate() {
                    let mut rest = remaining.to_vec();
                    rest.remove(i);
                    prefix.push(x);
                    go(&rest, prefix, out);
                    prefix.pop();
                }
            }
            let mut out = Vec::new();
            go(&(0..n).collect::<Vec<_>>(), &mut Vec::new(), &mut out);
            out
        }
        // Small deterministic grid of codes.
        let pool: Vec<DiagnosisCode> = (0..4)
            .map(|i| code(&format!("c{i}"), i % 2 == 0, i < 2, (i as u32) % 3))
            .collect();
        for n in 1..=4usize {
            let v = Visit {
                codes: pool[..n].to_vec(),
                los_days: 0,
            };
            let sorted = order_codes_within_visit(&v).unwrap();
            // brute force: best permutation = stable-min over key sequence
            let mut best: Option<Vec<usize>> = None;
            for perm in permutations(n) {
                let keys: Vec<_> = perm.iter().map(|&i| key(&v.codes[i])).collect();
                let sorted_keys = {
                    let mut k = keys.clone();
                    k.sort();
                    k
                };
                if keys == sorted_keys {
                    // among sorted arrangements, stability picks the one
                    // with lexicographically smallest original indices
                    match &best {
                        Some(b) => {
                            let better = perm
                                .iter()
                                .zip(b.iter())
                                .find(|(a, c)| a != c)
                                .map(|(a, c)| a < c)
                                .unwrap_or(false);
                            if better {
                                best = Some(perm);
                            }
                        }
                        None => best = Some(perm),
                    }
                }
            }
            let expect: Vec<_> = best
                .unwrap()
                .iter()
                .map(|&i| v.codes[i].code.clone())
                .collect();
            let got: Vec<_> = sorted.codes.iter().map(|c| c.code.clone()).collect();
            assert_eq!(got, expect, "n={n}");
        }
    }

    #[test]
    fn ordering_idempotent_and_permutation() {
        let v = Visit {
            codes: vec![
                code("a", false, false, 3),
                code("b", true, true, 1),
                code("c", false, true, 0),
            ],
            los_days: 2,
        };
        let once = order_codes_within_visit(&v).unwrap();
        let twice = order_codes_within_visit(&once).unwrap();
        assert_eq!(once, twice);
        let mut orig: Vec<_> = v.codes.iter().map(|c| c.code.clone()).collect();
        let mut sorted: Vec<_> = once.codes.iter().map(|c| c.code.clone()).collect();
        orig.sort();
        sorted.sort();
        assert_eq!(orig, sorted);
    }

    #[test]
    fn prolonged_los_boundaries() {
        assert!(derive_prolonged_los_label(&patient(vec![
            simple_visit(&["a"], 3),
            simple_visit(&["b"], 8),
        ])));
        assert!(!derive_prolonged_los_label(&patient(vec![simple_visit(
            &["a"], 7
        )])));
        assert!(!derive_prolonged_los_label(&patient(vec![
            simple_visit(&["a"], 0),
            simple_visit(&["b"], 0),
            simple_visit(&["c"], 0),
        ])));
    }

    #[test]
    fn vocabulary_build_and_determinism() {
        let cohort = vec![patient(vec![simple_visit(&["A", "B", "A"], 1)])];
        let v1 = build_vocabulary(&cohort).unwrap();
        assert_eq!(v1.size(), 5);
        assert_eq!(v1.id_of("A"), Some(3));
        assert_eq!(v1.id_of("B"), Some(4));
        let v2 = build_vocabulary(&cohort).unwrap();
        assert_eq!(v1, v2);
        assert!(matches!(build_vocabulary(&[]), Err(Error::EmptyCohort)));
    }

    #[test]
    fn vocabulary_counts_distinct_codes() {
        // 500 distinct codes scattered over patients -> 503 entries,
        // cross-checked against an independent set-based scan.
        let mut cohort = Vec::new();
        for p in 0..50 {
            let codes: Vec<String> = (0..10).map(|i| format!("icd{}", (p * 10 + i) % 500)).collect();
            let refs: Vec<&str> = codes.iter().map(|s| s.as_str()).collect();
            cohort.push(patient(vec![simple_visit(&refs, 1)]));
        }
        let vocab = build_vocabulary(&cohort).unwrap();
        let distinct: std::collections::HashSet<&str> = cohort
            .iter()
            .flat_map(|p| p.visits.iter())
            .flat_map(|v| v.codes.iter())
            .map(|c| c.code.as_str())
            .collect();
        assert_eq!(distinct.len(), 500);
        assert_eq!(vocab.size(), distinct.len() + 3);
    }

    #[test]
    fn encode_basic() {
        let cohort = vec![patient(vec![
            simple_visit(&["A", "B"], 1),
            simple_visit(&["C"], 1),
        ])];
        let vocab = build_vocabulary(&cohort).unwrap();
        let input = encode_patient(&cohort[0], &vocab, 512).unwrap();
        assert_eq!(input.code_ids, vec![3, 4, 5]);
        assert_eq!(input.serialization_ids, vec![0, 1, 0]);
        assert_eq!(input.visit_ids, vec![1, 1, 2]);
        assert_eq!(input.length, 3);
    }

    #[test]
    fn encode_unknown_maps_to_unk() {
        let known = vec![patient(vec![simple_visit(&["A", "C"], 1)])];
        let vocab = build_vocabulary(&known).unwrap();
        let p = patient(vec![simple_visit(&["A", "B"], 1), simple_visit(&["C"], 1)]);
        let input = encode_patient(&p, &vocab, 512).unwrap();
        assert_eq!(input.code_ids, vec![3, UNK_ID, 4]);
    }

    #[test]
    fn encode_truncates_at_visit_boundary() {
        // 600 codes in 10 visits of 60; max 512 keeps the last 8 visits
        // (480 codes), first retained visit complete, visit ids from 1.
        let visits: Vec<Visit> = (0..10)
            .map(|v| {
                let codes: Vec<String> = (0..60).map(|i| format!("v{v}c{i}")).collect();
                let refs: Vec<&str> = codes.iter().map(|s| s.as_str()).collect();
                simple_visit(&refs, 1)
            })
            .collect();
        let p = patient(visits);
        let vocab = build_vocabulary(&[p.clone()]).unwrap();
        let input = encode_patient(&p, &vocab, 512).unwrap();
        assert_eq!(input.length, 480);
        assert_eq!(input.visit_ids[0], 1);
        assert_eq!(*input.visit_ids.last().unwrap(), 8);
        // independent reference flattener over the kept suffix
        let mut expect = Vec::new();
        for v in &p.visits[2..] {
            for c in &v.codes {
                expect.push(vocab.encode(&c.code));
            }
        }
        assert_eq!(input.code_ids, expect);
        assert_eq!(input.serialization_ids[0], 0);
    }

    #[test]
    fn encode_single_oversized_visit_keeps_recent_codes() {
        let codes: Vec<String> = (0..20).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = codes.iter().map(|s| s.as_str()).collect();
        let p = patient(vec![simple_visit(&refs, 1)]);
        let vocab = build_vocabulary(&[p.clone()]).unwrap();
        let input = encode_patient(&p, &vocab, 8).unwrap();
        assert_eq!(input.length, 8);
        assert_eq!(input.code_ids[0], vocab.id_of("c12").unwrap());
        assert_eq!(input.visit_ids, vec![1; 8]);
    }

    #[test]
    fn encode_empty_patient_errors() {
        let p = patient(vec![]);
        let vocab = build_vocabulary(&[patient(vec![simple_visit(&["A"], 1)])]).unwrap();
        assert!(matches!(
            encode_patient(&p, &vocab, 8),
            Err(Error::EmptyPatient(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.jsonl");
        let cohort = vec![
            PatientRecord {
                patient_id: "p1".into(),
                outcome_label: Some(true),
                visits: vec![simple_visit(&["A", "B"], 9)],
            },
            PatientRecord {
                patient_id: "p2".into(),
                outcome_label: None,
                visits: vec![simple_visit(&["C"], 2), simple_visit(&["A"], 0)],
            },
        ];
        write_cohort_jsonl(&cohort, &path).unwrap();
        let back = read_cohort_jsonl(&path).unwrap();
        assert_eq!(cohort, back);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let cohort = vec![patient(vec![simple_visit(&["A", "B", "C"], 1)])];
        let vocab = build_vocabulary(&cohort).unwrap();
        vocab.write_to(&path).unwrap();
        let back = Vocabulary::read_from(&path).unwrap();
        assert_eq!(vocab, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\t0\n[MASK]\t1\n[UNK]\t2\n"));
    }

    proptest! {
        #[test]
        fn prolonged_los_equals_max_over_visits(los in proptest::collection::vec(0u32..20, 1..8)) {
            let visits: Vec<Visit> = los.iter().map(|&d| simple_visit(&["a"], d)).collect();
            let p = patient(visits);
            let by_max = *los.iter().max().unwrap() > 7;
            prop_assert_eq!(derive_prolonged_los_label(&p), by_max);
        }

        #[test]
        fn encode_invariants_and_roundtrip(
            visit_sizes in proptest::collection::vec(1usize..6, 1..6),
            max_seq in 4usize..64,
        ) {
            let visits: Vec<Visit> = visit_sizes.iter().enumerate().map(|(v, &n)| {
                let codes: Vec<String> = (0..n).map(|i| format!("v{v}i{i}")).collect();
                let refs: Vec<&str> = codes.iter().map(|s| s.as_str()).collect();
                simple_visit(&refs, 1)
            }).collect();
            let p = patient(visits);
            let vocab = build_vocabulary(&[p.clone()]).unwrap();
            let input = encode_patient(&p, &vocab, max_seq).unwrap();
            prop_assert!(input.length <= max_seq);
            prop_assert_eq!(input.code_ids.len(), input.length);
            prop_assert_eq!(input.serialization_ids.len(), input.length);
            prop_assert_eq!(input.visit_ids.len(), input.length);
            prop_assert_eq!(input.visit_ids[0], 1);
            for i in 1..input.length {
                prop_assert!(input.visit_ids[i] >= input.visit_ids[i-1]);
                if input.visit_ids[i] != input.visit_ids[i-1] {
                    prop_assert_eq!(input.serialization_ids[i], 0);
                } else {
                    prop_assert_eq!(input.serialization_ids[i], input.serialization_ids[i-1] + 1);
                }
            }
            prop_assert_eq!(input.serialization_ids[0], 0);
            // round-trip when the patient fits entirely
            if p.total_codes() <= max_seq {
                let decoded = decode_input(&input, &vocab);
                let flat: Vec<String> = p.visits.iter()
                    .flat_map(|v| v.codes.iter().map(|c| c.code.clone()))
                    .collect();
                prop_assert_eq!(decoded, flat);
            }
        }
    }
}
