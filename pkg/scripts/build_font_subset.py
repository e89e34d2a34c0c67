from fontTools.ttLib import TTFont
from fontTools import subset

ZH = "的一是不了人我在有他这个们中来上大为和国地到以说时要就出会可也你对生能而子那得于着下自之年过发后作里用道行所然家种事成方多经么去法学如都同现当没动面起看定天分还进好小部其些主样理心她本前开但因只从想实日军者意无力它与长把机十民第公此已工使情明性知全三又关点正业外将两高间由问很最重并物手应战向头文体政美相见被利什二等产或新己制身果加西斯月话合回特代内信表化老给世位次度门任常先海通教儿原东声提立及比员解水名真论处走义各入几口认条平系气题活尔更别打女变四神总何电数安少报才结反受目太量再感建务做接必场件计管期市直德资命山金指克许统区保至队形社便空决治展马科司五基眼书非则听白却界达光放强即像难且权思王象完设式色路记南品住告类求据程北边死张该交规万取拉格望觉术领共确传师观清今切院让识候带导争运笑飞风步改收根干造言联持组每济车亲极林服快办议往元英士证近失转夫令准布始怎"
KO = "가나다라마바사아자차카타파하이그는을의에한고서지도리기로게수어시대요것해주구보우일회정국인생각말만면학들전부상무여음장성년원동문경물산공제화소"
def uniq(s):
    out = []
    for ch in s:
        if ch not in out:
            out.append(ch)
    return "".join(out)
zh = uniq(ZH)[:100]
ko = uniq(KO)[:60]
assert len(zh) == 100 and len(ko) == 60, (len(zh), len(ko))
latin = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"
text = latin + zh + ko
opts = subset.Options()
opts.name_IDs = []
opts.notdef_outline = True
opts.layout_features = []
opts.hinting = False
opts.desubroutinize = True
f = TTFont("NotoSansCJKsc-Regular.otf")
s = subset.Subsetter(opts)
s.populate(text=text)
s.subset(f)
name = f["name"]
for nid, val in [(0, "Copyright 2014, 2015 Adobe Systems Incorporated (http://www.adobe.com/). Subset derived from Noto Sans CJK SC."),
                 (1, "AnyGlyph Mini Sans"), (2, "Regular"), (3, "AnyGlyphMiniSans-Regular"),
                 (4, "AnyGlyph Mini Sans Regular"), (6, "AnyGlyphMiniSans-Regular"),
                 (13, "This Font Software is licensed under the SIL Open Font License, Version 1.1."),
                 (14, "http://scripts.sil.org/OFL")]:
    name.setName(val, nid, 3, 1, 0x409)
    name.setName(val, nid, 1, 0, 0)
# CFF internal names
cff = f["CFF "].cff
cff.fontNames = ["AnyGlyphMiniSans-Regular"]
td = cff.topDictIndex[0]
for k in ("FullName", "FamilyName"):
    if hasattr(td, k):
        setattr(td, k, "AnyGlyph Mini Sans")
f.save("/root/pkg/src/anyglyph/fonts/AnyGlyphMiniSans-Regular.otf")
print(zh); print(ko)
