"""Published AUC values used as reference rows when rendering result tables."""

BUDGETS = (500, 1000, 3000, 10000)

# Comparison tables per dataset: method -> AUC per budget in BUDGETS order.
COMPARISON = {
    "DRIVE": {
        "Dasgupta et al.": (0.85, 0.87, 0.89, 0.92),
        "Liskowski et al.": (0.83, 0.84, 0.87, 0.92),
        "U-Net": (0.89, 0.90, 0.92, 0.95),
        "Prior SS-GAN (CP)": (0.82, 0.84, 0.85, 0.93),
        "Proposed (SP)": (0.92, 0.94, 0.96, 0.97),
    },
    "STARE": {
        "Dasgupta et al.": (0.82, 0.84, 0.87, 0.91),
        "Liskowski et al.": (0.84, 0.86, 0.89, 0.93),
        "U-Net": (0.86, 0.89, 0.90, 0.94),
        "Prior SS-GAN (CP)": (0.80, 0.81, 0.83, 0.90),
        "Proposed (SP)": (0.90, 0.92, 0.94, 0.96),
    },
}

GENRES = {
    "Dasgupta et al.": "Supervised",
    "Liskowski et al.": "Supervised",
    "U-Net": "Supervised",
    "Prior SS-GAN (CP)": "Semi Supervised",
    "Proposed (SP)": "Semi Supervised",
}

# Center-pixel head on DRIVE, with and without the unsupervised real-data term.
UNSUP_BENEFIT_BUDGETS = (500, 1000, 2000, 3000)
UNSUP_BENEFIT = {
    "Prior SS-GAN (CP)": (0.82, 0.84, 0.85, 0.81),
    "Proposed (CP)": (0.86, 0.88, 0.89, 0.90),
}

# DRIVE, 1K labeled patches. Feature-matching columns then the vanilla column.
ABLATION_LAYERS = ("C1", "C3", "C5", "C7", "C9")
ABLATION = {
    ("max", "none"): {"C1": 0.66, "C3": 0.68, "C5": 0.72, "C7": 0.70, "C9": 0.69, "vanilla": 0.62},
    ("average", "none"): {"C1": 0.81, "C3": 0.83, "C5": 0.80, "C7": 0.84, "C9": 0.77, "vanilla": 0.75},
    ("average", "instance"): {"C1": 0.84, "C3": 0.86, "C5": 0.87, "C7": 0.87, "C9": 0.82, "vanilla": 0.79},
    ("average", "weight"): {"C1": 0.87, "C3": 0.89, "C5": 0.86, "C7": 0.92, "C9": 0.89, "vanilla": 0.84},
}

# Budget/diversity points quoted in the text: (dataset, budget, pool) -> AUC.
DIVERSITY_POINTS = {
    ("STARE", 500, 15): 0.85,
    ("STARE", 1000, 10): 0.81,
}

FULL_SUPERVISION = {"DRIVE": 0.97, "STARE": 0.96}
FULL_SUPERVISION_PATCHES = 60000
