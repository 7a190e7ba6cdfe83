//! Self-diagnosis: scoring a text for an attribute from the model's own
//! answer-word probabilities, plus threshold calibration, classification
//! accuracy and Pearson correlation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenSequence};
use crate::templates::{AttributeDescription, TemplateSpec};

/// The probability that a text exhibits an attribute, together with the raw
/// answer-word probabilities it was computed from.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DiagnosisScore {
    pub value: f64,
    pub p_yes: f64,
    pub p_no: f64,
}

impl DiagnosisScore {
    /// `value = p_yes / (p_yes + p_no)`; requires positive total answer mass.
    pub fn from_probs(p_yes: f64, p_no: f64) -> Result<Self> {
        if p_yes < 0.0 || p_no < 0.0 {
            return Err(Error::validation(format!(
                "answer-word probabilities must be nonnegative, got {p_yes} / {p_no}"
            )));
        }
        let total = p_yes + p_no;
        if total <= 0.0 {
            return Err(Error::DegenerateModel(
                "model assigns zero probability to both answer words".into(),
            ));
        }
        Ok(DiagnosisScore {
            value: p_yes / total,
            p_yes,
            p_no,
        })
    }
}

/// Scores `text` for attribute `y`: renders the self-diagnosis input and
/// reads the answer-word probabilities at the next-token slot.
pub fn diagnose(
    model: &dyn LanguageModel,
    text: &str,
    y: &AttributeDescription,
    template: &TemplateSpec,
) -> Result<DiagnosisScore> {
    if text.is_empty() {
        return Err(Error::input("self-diagnosis input text must be nonempty"));
    }
    let (yes_word, no_word) = template.answer_words();
    let vocab = model.vocabulary();
    let mut positions = [0usize; 2];
    for (slot, word) in [yes_word, no_word].iter().enumerate() {
        if word.split_whitespace().count() != 1 {
            return Err(Error::config(format!(
                "answer word {word:?} is not a single token"
            )));
        }
        positions[slot] = vocab.position(word).ok_or_else(|| {
            Error::config(format!(
                "answer word {word:?} is not a single token in the model vocabulary"
            ))
        })?;
    }
    let rendered = template.render(text, y);
    let context = TokenSequence::from_text(&rendered);
    let dist = model.next_token_distribution(&context)?;
    DiagnosisScore::from_probs(dist.get(positions[0]), dist.get(positions[1]))
}

/// A text with its silver attribute score and the derived boolean label.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub silver_score: f64,
    pub silver_label: bool,
}

impl LabeledExample {
    /// Labels with the `score >= 0.5` convention.
    pub fn from_score(text: impl Into<String>, silver_score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&silver_score) {
            return Err(Error::validation(format!(
                "silver score must be in [0, 1], got {silver_score}"
            )));
        }
        Ok(LabeledExample {
            text: text.into(),
            silver_score,
            silver_label: silver_score >= 0.5,
        })
    }
}

/// A tuned classification threshold and the accuracy it reached on the
/// development split.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CalibrationResult {
    pub tau: f64,
    pub dev_accuracy: f64,
}

/// Scans the grid {0.00, 0.01, ..., 1.00} for the threshold maximizing the
/// accuracy of the rule `score >= tau`; ties break toward the smallest tau.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool]) -> Result<CalibrationResult> {
    check_paired(scores.len(), labels.len())?;
    let mut best = CalibrationResult {
        tau: 0.0,
        dev_accuracy: -1.0,
    };
    for step in 0..=100u32 {
        let tau = f64::from(step) / 100.0;
        let accuracy = accuracy_at(scores, labels, tau);
        if accuracy > best.dev_accuracy {
            best = CalibrationResult {
                tau,
                dev_accuracy: accuracy,
            };
        }
    }
    Ok(best)
}

/// Fraction of examples where `score >= tau` agrees with the label.
pub fn classification_accuracy(scores: &[f64], labels: &[bool], tau: f64) -> Result<f64> {
    check_paired(scores.len(), labels.len())?;
    Ok(accuracy_at(scores, labels, tau))
}

fn accuracy_at(scores: &[f64], labels: &[bool], tau: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&score, &label)| (score >= tau) == label)
        .count();
    correct as f64 / scores.len() as f64
}

fn check_paired(scores: usize, labels: usize) -> Result<()> {
    if scores == 0 {
        return Err(Error::input("need at least one scored example"));
    }
    if scores != labels {
        return Err(Error::input(format!(
            "got {scores} scores but {labels} labels"
        )));
    }
    Ok(())
}

/// Sample Pearson correlation coefficient.
///
/// Summation is fixed left-to-right so results are reproducible. Inputs with
/// zero variance are an explicit error rather than a silent default.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "correlation inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::input("correlation needs at least two pairs"));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "an input has zero variance".into(),
        ));
    }
    let r = cov / (var_a * var_b).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

/// Options for a diagnosis study.
#[derive(Debug, Clone)]
pub struct StudyOptions {
    /// Fraction of examples placed in the development split.
    pub dev_fraction: f64,
    /// Seed for the shuffle behind the dev/test split.
    pub seed: u64,
    pub template: TemplateSpec,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            dev_fraction: 0.5,
            seed: 0,
            template: TemplateSpec::sdg_default(),
        }
    }
}

/// Study report, serialized as
/// `{"attribute", "n_dev", "n_test", "tau", "dev_accuracy", "test_accuracy", "pcc"}`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiagnosisReport {
    pub attribute: String,
    pub n_dev: usize,
    pub n_test: usize,
    pub tau: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    /// Null when the correlation is undefined (constant scores).
    pub pcc: Option<f64>,
}

/// Runs the full study: seeded dev/test split, threshold calibration on dev,
/// accuracy on test, correlation over all examples.
pub fn run_diagnosis_study(
    model: &dyn LanguageModel,
    examples: &[LabeledExample],
    y: &AttributeDescription,
    options: &StudyOptions,
) -> Result<DiagnosisReport> {
    if examples.is_empty() {
        return Err(Error::input("diagnosis study needs at least one example"));
    }
    let n = examples.len();
    let n_dev = (n as f64 * options.dev_fraction).round() as usize;
    if n_dev == 0 || n_dev >= n {
        return Err(Error::input(format!(
            "dev fraction {} over {n} examples leaves no usable dev/test split",
            options.dev_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    order.shuffle(&mut rng);

    let mut scores = Vec::with_capacity(n);
    for example in examples {
        scores.push(diagnose(model, &example.text, y, &options.template)?.value);
    }

    let pick = |indices: &[usize]| -> (Vec<f64>, Vec<bool>) {
        let s = indices.iter().map(|&i| scores[i]).collect();
        let l = indices.iter().map(|&i| examples[i].silver_label).collect();
        (s, l)
    };
    let (dev_scores, dev_labels) = pick(&order[..n_dev]);
    let (test_scores, test_labels) = pick(&order[n_dev..]);

    let calibration = calibrate_threshold(&dev_scores, &dev_labels)?;
    let test_accuracy = classification_accuracy(&test_scores, &test_labels, calibration.tau)?;

    let silver: Vec<f64> = examples.iter().map(|e| e.silver_score).collect();
    let pcc = match pearson_correlation(&scores, &silver) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };

    Ok(DiagnosisReport {
        attribute: y.name.clone(),
        n_dev,
        n_test: n - n_dev,
        tau: calibration.tau,
        dev_accuracy: calibration.dev_accuracy,
        test_accuracy,
        pcc,
    })
}
