"""Early type 2 diabetes risk prediction from routine EHR data.

The toolkit covers the full desk-scale workflow: synthetic cohort
generation, encounter preprocessing and imputation, balanced fold
construction, an attention-based classifier with dense baselines,
MC-dropout uncertainty with entropy-based abstention, and metric /
fairness reporting. See the ``sacdnet`` CLI for the end-to-end chain.
"""

__version__ = "0.1.0"
