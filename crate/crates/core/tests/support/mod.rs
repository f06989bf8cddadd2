pub mod oracle;
pub mod prompt_cases;
pub mod reference;
pub mod toy;
