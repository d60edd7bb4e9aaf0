"""Writes how2sign_sample.csv, openasl_sample.tsv and ingest_expected.json.

Each row is built good or broken on purpose; the expected outcome is
recorded alongside it rather than computed by the engine.
"""
import json
import random
import unicodedata

rng = random.Random(7)
WORDS = "we are going to talk about hands signs and the sun today with a friend".split()


def sentence():
    s = " ".join(rng.choice(WORDS) for _ in range(rng.randint(3, 9)))
    return s[0].upper() + s[1:] + "."


def how2sign():
    header = ["VIDEO_ID", "VIDEO_NAME", "SENTENCE_ID", "SENTENCE_NAME", "START_REALIGNED", "END_REALIGNED", "SENTENCE"]
    rows, expect = [], {"retained": [], "rejected": {}}
    for i in range(24):
        vid = f"-fZc293MpJk"[:-1] + str(i % 3)
        vname = f"{vid}-1-rgb_front"
        sname = f"{vid}_{i}-1-rgb_front"
        start = round(rng.uniform(0, 100), 2)
        end = round(start + rng.uniform(1, 12), 2)
        row = [vid, vname, f"{vid}_{i}", sname, str(start), str(end), sentence()]
        if i == 3:
            row = row[:5]
            expect["rejected"][sname] = "MalformedRow"
        elif i == 7:
            row[4] = "abc"
            expect["rejected"][sname] = "BadTiming"
        elif i == 11:
            row[4], row[5] = str(end), str(start)
            expect["rejected"][sname] = "BadTiming"
        elif i == 15:
            row[3] = ""
            expect["rejected"]["#row17"] = "MissingId"
        elif i == 19:
            row.append("stray")
            expect["rejected"][sname] = "MalformedRow"
        elif i == 21:
            row[6] = '  He said  "yes" cafe\u0301   twice '
            expect["retained"].append(sname)
            expect["texts"] = {sname: " ".join(unicodedata.normalize("NFC", row[6]).split())}
        else:
            expect["retained"].append(sname)
        rows.append(row)
    with open("how2sign_sample.csv", "w", newline="") as f:
        f.write("\t".join(header) + "\n")
        for r in rows:
            f.write("\t".join(r) + "\n")
    expect["rows"] = len(rows)
    expect["columns"] = {
        "VIDEO_NAME": "video_id", "SENTENCE_NAME": "sample_id", "START_REALIGNED": "start_s",
        "END_REALIGNED": "end_s", "SENTENCE": "text",
    }
    expect["extras"] = ["VIDEO_ID", "SENTENCE_ID"]
    return expect


def hms(t):
    h = int(t // 3600)
    m = int(t % 3600 // 60)
    return f"{h:02d}:{m:02d}:{t % 60:06.3f}"


def openasl():
    header = ["vid", "yid", "start", "end", "raw-text", "tokenized-text", "split", "signer", "bbox"]
    rows, expect = [], {"retained": [], "rejected": {}}
    splits = ["train", "valid", "test"]
    for i in range(22):
        yid = f"yt{i % 4:03d}"
        vid = f"{yid}-{i:05d}"
        start = rng.uniform(0, 600)
        end = start + rng.uniform(0.5, 9)
        text = sentence()
        bbox = f"{rng.uniform(0, .3):.3f},{rng.uniform(0, .3):.3f},{rng.uniform(.6, 1):.3f},{rng.uniform(.6, 1):.3f}"
        row = [vid, yid, hms(start), hms(end), text, text.lower(), splits[i % 3], f"s{i % 5}", bbox]
        if i == 2:
            row[8] = "0.5,0.5,0.1"
            expect["rejected"][vid] = "BadBbox"
        elif i == 6:
            row[8] = "0.9,0.1,0.2,0.8"
            expect["rejected"][vid] = "BadBbox"
        elif i == 9:
            row[2] = "00:00:75.000"
            expect["rejected"][vid] = "BadTiming"
        elif i == 13:
            row[1] = ""
            expect["rejected"][vid] = "MissingId"
        elif i == 17:
            row = row[:4]
            expect["rejected"][vid] = "MalformedRow"
        elif i == 20:
            row[8] = ""
            expect["retained"].append(vid)
        else:
            expect["retained"].append(vid)
        rows.append(row)
    with open("openasl_sample.tsv", "w", newline="") as f:
        f.write("\t".join(header) + "\n")
        for r in rows:
            f.write("\t".join(r) + "\n")
    expect["rows"] = len(rows)
    expect["columns"] = {
        "vid": "sample_id", "yid": "video_id", "start": "start_s", "end": "end_s", "raw-text": "text",
        "split": "split", "signer": "signer_id", "bbox": "bbox",
    }
    expect["extras"] = ["tokenized-text"]
    return expect


out = {"how2sign_csv": how2sign(), "openasl_tsv": openasl()}
with open("ingest_expected.json", "w") as f:
    json.dump(out, f, indent=2, sort_keys=True, ensure_ascii=False)
    f.write("\n")
