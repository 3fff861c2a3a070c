// Generated by tests/oracles/freeze_values.py; do not edit.
#pragma once

namespace frozen {

inline constexpr double kSeed0Normals[] = {
    -1.8839083333524405,
    0.22760793546360525,
    -0.22143788059715477,
    0.08341854419566393,
};

inline constexpr double kMatmul5x4x3[] = {
    -0.8296528069816368,
    -1.0213300867944335,
    2.349231457354147,
    3.838654713922415,
    1.7893924267874097,
    -3.9268218714422582,
    2.018747488747434,
    -1.2171681388813056,
    -0.11380034688927285,
    2.6118854327043652,
    1.8244740712192524,
    -2.333353637945206,
    -1.3950119176250801,
    1.361877543682011,
    -1.1676739905382734,
};

inline constexpr double kSoftmaxWide[] = {
    1.0,
    0.0,
};

inline constexpr double kPoolN8B3[] = {
    0.1931109159026296,
    -0.6325366771609202,
    -0.582429315734739,
    -0.20245018406753015,
    0.29040607604706264,
    -0.03283714366731173,
    1.0436582257267273,
    1.0310704962359039,
    0.5037449111761994,
};

inline constexpr double kAffinityN8B2[] = {
    0.7688594916352152,
    0.7061069666301714,
    0.2804681269977261,
    -0.5808551091001394,
};

inline constexpr double kDenseCausalN16H2D4[] = {
    -1.2255580519477156,
    0.5162821553703937,
    0.047901290135730724,
    0.6547283817430273,
    0.6155981426546958,
    1.206260506151578,
    -0.7238688220656613,
    -0.4474285321356541,
    0.0049617152295373295,
    0.6678005530560518,
    -0.39793425955035633,
    2.005127911117491,
    0.9160449890573433,
    0.30788542868011765,
    -0.8217930592007077,
    0.07730544271481675,
    -0.47409266529075605,
    0.6600390373438387,
    -0.36503966370051455,
    1.6207858862889364,
    0.713905672234866,
    0.41099983775358484,
    -0.778651160101055,
    -0.2622026354590587,
    -0.3326113380116081,
    0.47163144548750174,
    -0.37635358803950425,
    1.608107149608411,
    0.750662403062698,
    0.051762421242915184,
    -0.9280489112048804,
    -0.4128327403250805,
    -0.08750924680923115,
    0.7107434212789914,
    -0.06434765836909549,
    0.910758958243225,
    0.37614541242552957,
    -0.35067918567346557,
    -0.5607617681536867,
    0.1602119137297704,
    -0.7369075905554194,
    0.4300917323400609,
    0.06106189059598301,
    0.012755350334854835,
    0.08433539680628473,
    1.3779615444562636,
    -0.09905008171690387,
    -0.07854670725251188,
    -1.7168739308181453,
    0.5757776318108727,
    -0.25842115663744186,
    0.0257688014052796,
    0.5596796630119167,
    0.507629843864089,
    -0.6034688185676922,
    -0.09967793282810851,
    0.14603403276181887,
    0.7025879636482354,
    0.0037739147459941416,
    0.7154733633294377,
    0.6948612171512683,
    -0.1529967347495765,
    -0.7128721544479779,
    -0.04226225543669536,
    -0.42969894194182934,
    -0.13449601905605696,
    -0.11314096477886898,
    -0.16802042679964446,
    0.5028822188542703,
    0.3437575360211474,
    -0.08830873897975469,
    0.17012047433436298,
    -0.822534205685473,
    -0.06988976726680445,
    -0.31087902769033077,
    -0.22165526875106736,
    0.7190808994129453,
    -0.20006744179860078,
    -0.7920905253147261,
    0.006734093635215442,
    0.00535847696137202,
    0.1449078873007278,
    -0.048159930210129376,
    -0.13630892058710226,
    0.34798663409313785,
    0.3622582328250095,
    0.29639915032708375,
    0.3602863209281578,
    0.4233568660884835,
    -0.0308191757591529,
    -0.040356702315102425,
    -0.22529719163728004,
    0.19410840002250776,
    0.07957382057637824,
    -0.5279566886615862,
    0.058279444683473215,
    0.9569277622263018,
    -0.23863787952131862,
    -0.3012201041557647,
    0.3176419099661787,
    0.36486911424368773,
    0.4739268377092373,
    -0.31234557792335915,
    0.05440612473269717,
    -0.07845323305599132,
    0.2902291175290821,
    -0.19298427549134364,
    -0.16910009131109482,
    0.2825774584172146,
    0.10352559722835128,
    -0.2611768562642149,
    -0.11286216897878842,
    -0.15649799039084927,
    0.511192982353837,
    -0.3476706208046673,
    -0.10881426131440353,
    0.2840287684275175,
    0.12313422306715581,
    0.1934136756519744,
    -0.2781984526359698,
    -0.42468409127912093,
    0.4673262078355338,
    -0.10831867611231065,
    -0.32663203336251556,
    0.16165569813279757,
    0.9782072526524119,
    -0.48448464517272255,
    -0.004814190887708527,
};

inline constexpr double kGatherN8B2K2[] = {
    1.7469138694796489,
    -0.9175958098589589,
    -1.405932401248683,
    0.07975280105944361,
    -1.7990478356455841,
    -1.155520487782895,
    0.3206445176057628,
    1.0174475540581818,
    0.58210971057457,
    -0.6286521571505582,
    -0.7204335177657182,
    0.2533354265093548,
    -0.8022776065892717,
    -0.30446026214647726,
    0.09320416520042808,
    0.2738952924890656,
    -0.14431065924785236,
    0.8509901034226142,
    -0.37442369182985263,
    -0.6375699809488808,
    -0.3831096550748859,
    0.4153898864105766,
    0.12037047692955966,
    -0.4306736490711415,
    -1.078983037318805,
    1.0859570455407441,
    0.7150385800130978,
    -1.4657237002386396,
    0.5613565505707888,
    0.5503949372058061,
    -0.6534465263164966,
    -0.9953778290434382,
};

inline constexpr unsigned long kLmTargets[] = {0, 4, 2, 1, 3, 3, 0, 2};

inline constexpr double kLmLossN8V5[] = {
    1.741706281773657,
};

}  // namespace frozen
