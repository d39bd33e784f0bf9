"""Closed vocabulary describing sprites.

Identity words exist so the tokenizer can represent them, but captions never
use them: identity has to reach the generator through the character encoder.
"""

HUE_NAMES = ("red", "orange", "yellow", "lime", "green", "cyan", "blue", "violet")
SHAPES = ("circle", "square", "triangle")
ACCESSORIES = ("none", "hat", "badge")
EYE_NAMES = ("black", "white", "grey", "navy")

HORIZONTAL = ("left", "center", "right")
VERTICAL = ("top", "middle", "bottom")
SIZES = ("small", "medium", "large")
ROTATIONS = ("upright", "quarter", "inverted", "threequarter")
BACKGROUNDS = ("slate", "sand", "ash", "fog", "moss", "dusk", "clay", "snow")

FILLER = ("a", "sprite", "at", "on", "background", "turned")

IDENTITY_WORDS = HUE_NAMES + SHAPES + ACCESSORIES[1:] + tuple(f"eyes{e}" for e in EYE_NAMES)
VARIATION_WORDS = HORIZONTAL + VERTICAL + SIZES + ROTATIONS + BACKGROUNDS

WORDS = FILLER + VARIATION_WORDS + IDENTITY_WORDS
