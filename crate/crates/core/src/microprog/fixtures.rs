use super::{load_program, MicroProgram};

/// Names of the bundled scenarios, in a stable order.
pub const FIXTURE_NAMES: [&str; 5] = [
    "fig1",
    "table1_three_tests",
    "listing1_two_paths",
    "listing2_error_path",
    "listing4_btrace",
];

const SOURCES: [&str; 5] = [
    include_str!("../../fixtures/fig1.json"),
    include_str!("../../fixtures/table1_three_tests.json"),
    include_str!("../../fixtures/listing1_two_paths.json"),
    include_str!("../../fixtures/listing2_error_path.json"),
    include_str!("../../fixtures/listing4_btrace.json"),
];

/// A bundled scenario program with its shipped test inputs.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub program: MicroProgram,
}

pub fn fixtures() -> Vec<Fixture> {
    FIXTURE_NAMES
        .iter()
        .zip(SOURCES)
        .map(|(name, text)| Fixture {
            name,
            program: load_program(text).expect("bundled fixtures are valid"),
        })
        .collect()
}

pub fn fixture(name: &str) -> Option<Fixture> {
    fixtures().into_iter().find(|f| f.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_fixtures_load_with_tests() {
        let all = fixtures();
        assert_eq!(all.len(), FIXTURE_NAMES.len());
        for f in all {
            assert_eq!(f.program.name, f.name);
            assert!(!f.program.tests.is_empty(), "{}", f.name);
        }
        assert!(fixture("nope").is_none());
    }
}
