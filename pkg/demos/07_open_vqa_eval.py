# # Judged Open-VQA evaluation
#
# A judge decides whether a free-form prediction implies the reference
# answer. Verdicts are tallied per category. The offline stub judge checks
# for the reference as a whole word; a remote chat endpoint gets the prompt
# shown below.

import tempfile

from prefixmm.clients import StubClient
from prefixmm.evaluation import (HumanEvalSheet, aggregate, build_judge_prompt, judge_all, load_items,
                                 pad_image, report_from_counts, validate_human_sheet)
from prefixmm.synthetic import shape_image, write_openvqa_fixture

print(build_judge_prompt("What color is the car?", "It is red.", "red"))

items = load_items(write_openvqa_fixture(tempfile.mkdtemp(), resolution=56))
# a pretend model that gets every other item right
predictions = {it.id: (f"I think {it.answer}." if i % 2 == 0 else "Not sure.") for i, it in enumerate(items)}
report = aggregate(judge_all(StubClient(), items, predictions), items)
print(report.table("half-right"))

# ## Reported counts reproduce the headline numbers

image = report_from_counts({"OCR": (36, 53), "Counting": (25, 37), "Reasoning": (26, 31),
                            "Place": (17, 22), "Color": (21, 30), "Spatial": (9, 15),
                            "Action": (17, 20), "Others": (79, 94)})
video = report_from_counts({"Action(Y/N)": (69, 108), "Others": (29, 40)})
print("image overall", image.overall, " video overall", video.overall)

# ## Human score sheets

sheet = HumanEvalSheet("ann-1", {"q1": {"A": 5, "B": 4, "C": 4}, "q2": {"A": 3, "B": 3, "C": 3}})
print(validate_human_sheet(sheet).violations)

# ## Padding images for side-by-side comparisons

print(pad_image(shape_image("red", "top left", "circle", resolution=224)).data.shape)
